//! End-to-end acceptance checks. Runs every criterion in order and prints one
//! PASS/FAIL line per criterion; exits non-zero if any fails.
//!
//! `cargo test -p voxfield-core --test acceptance -- 3 5` runs a subset.

use std::collections::{BTreeSet, HashMap};
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxfield_core::autodiff::Tape;
use voxfield_core::field::sh::{sh_basis, sh_logits, sh_to_color, SH_BASIS};
use voxfield_core::field::{
    render_ray, render_rays_on_tape, RenderSettings, DENSITY_CHANNEL, FIELD_CHANNELS,
};
use voxfield_core::geometry::{all_pixels, generate_rays};
use voxfield_core::io;
use voxfield_core::net::{self, forward, NetConfig, NetParams};
use voxfield_core::objectives::{
    total_loss_on_tape, FeatureExtractor, GradientPyramid, LossConfig, Patch, PatchBatch,
};
use voxfield_core::pipeline::{
    bake, evaluate_views, generate_synthetic_scene, render_view, Scene, SynthSpec, TrainConfig,
    TrainLog, Trainer, ViewMetrics,
};
use voxfield_core::sparse::{generative_transposed_conv, sparse_conv, ConvWeights};
use voxfield_core::{Camera, Coord, Pose, RadianceField, Ray, RgbdFrame, SparseTensor, Vec3};

// ---------------------------------------------------------------------------
// shared helpers

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_dir(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_field(rng: &mut ChaCha8Rng) -> RadianceField {
    let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
    let extent = rng.gen_range(3..6);
    let mut coords = BTreeSet::new();
    let n = rng.gen_range(5..extent * extent * extent);
    while coords.len() < n as usize {
        coords.insert([0, 1, 2].map(|_| rng.gen_range(-2..extent - 2) * stride));
    }
    let coords: Vec<Coord> = coords.into_iter().collect();
    let mut feats = Vec::with_capacity(coords.len() * FIELD_CHANNELS);
    for _ in &coords {
        for c in 0..FIELD_CHANNELS {
            feats.push(if c == DENSITY_CHANNEL {
                rng.gen_range(-4.0..12.0)
            } else {
                rng.gen_range(-2.0..2.0)
            });
        }
    }
    let voxel = rng.gen_range(0.05..0.2);
    let origin = Vec3::new(
        rng.gen_range(-0.2..0.2),
        rng.gen_range(-0.2..0.2),
        rng.gen_range(-0.2..0.2),
    );
    let t = SparseTensor::new(coords, feats, FIELD_CHANNELS, stride).unwrap();
    RadianceField::new(t, voxel, origin).unwrap()
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v
        .into_iter()
        .fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

// ---------------------------------------------------------------------------
// 1. rendering against a brute-force evaluator

fn softplus_ref(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Real SH up to degree 2 written from spherical coordinates.
fn sh_closed_form(d: &Vec3) -> [f64; 9] {
    let theta = d.z.clamp(-1.0, 1.0).acos();
    let phi = d.y.atan2(d.x);
    let (st, ct) = theta.sin_cos();
    let norm = |l: i32, m: i32| {
        let fact = |n: i32| (1..=n).map(|k| k as f64).product::<f64>();
        ((2 * l + 1) as f64 / (4.0 * PI) * fact(l - m) / fact(l + m)).sqrt()
    };
    // associated Legendre functions with the Condon-Shortley phase
    let p = |l: i32, m: i32| match (l, m) {
        (0, 0) => 1.0,
        (1, 0) => ct,
        (1, 1) => -st,
        (2, 0) => 0.5 * (3.0 * ct * ct - 1.0),
        (2, 1) => -3.0 * ct * st,
        (2, 2) => 3.0 * st * st,
        _ => unreachable!(),
    };
    let y = |l: i32, m: i32| {
        let a = m.abs();
        if m == 0 {
            norm(l, 0) * p(l, 0)
        } else if m > 0 {
            2f64.sqrt() * norm(l, a) * p(l, a) * (a as f64 * phi).cos()
        } else {
            2f64.sqrt() * norm(l, a) * p(l, a) * (a as f64 * phi).sin()
        }
    };
    [
        y(0, 0),
        y(1, -1),
        y(1, 0),
        y(1, 1),
        y(2, -2),
        y(2, -1),
        y(2, 0),
        y(2, 1),
        y(2, 2),
    ]
}

/// Naive per-sample loop: trilinear lookup of raw density and SH, shifted
/// softplus, sigmoid color, front-to-back compositing over a background.
fn brute_force_render(
    field: &RadianceField,
    ray: &Ray,
    s: &RenderSettings,
) -> ([f64; 3], f64, Vec<f64>, f64) {
    let stride = field.stride() as i64;
    let cell = field.voxel_size() * stride as f64;
    let mut grid: HashMap<[i64; 3], Vec<f64>> = HashMap::new();
    let t = field_coords(field);
    for (r, c) in t.iter().enumerate() {
        grid.insert(c.map(|v| v as i64 / stride), field.feat(r).to_vec());
    }
    let y = sh_closed_form(&ray.direction);
    let n = ((s.far - s.near) / s.step).floor() as usize;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut weights = Vec::new();
    for i in 0..n {
        let t = s.near + (i as f64 + 0.5) * s.step;
        let p = ray.origin + t * ray.direction;
        let u = (p - field.origin()) / cell;
        let mut raw = 0.0;
        let mut k = [0.0; 27];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0i64; 3];
            for a in 0..3 {
                let g = u[a] - 0.5;
                let lo = g.floor();
                let f = g - lo;
                let hi = (corner >> (2 - a)) & 1 == 1;
                idx[a] = lo as i64 + hi as i64;
                w *= if hi { f } else { 1.0 - f };
            }
            match grid.get(&idx) {
                Some(v) => {
                    raw += w * v[27];
                    for (kc, vc) in k.iter_mut().zip(v) {
                        *kc += w * vc;
                    }
                }
                None => raw += w * s.empty_density,
            }
        }
        let sigma = softplus_ref(raw + s.shift);
        let alpha = 1.0 - (-sigma * s.step).exp();
        let w = trans * alpha;
        for ch in 0..3 {
            let logit: f64 = (0..9).map(|m| k[ch * 9 + m] * y[m]).sum();
            color[ch] += w / (1.0 + (-logit).exp());
        }
        depth += w * t;
        weights.push(w);
        trans *= 1.0 - alpha;
    }
    for ch in 0..3 {
        color[ch] += trans * s.background[ch];
    }
    (color, depth, weights, trans)
}

fn field_coords(field: &RadianceField) -> Vec<Coord> {
    field.geometry().coords().coords().to_vec()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut rays_done = 0;
    let mut visible = 0;
    while rays_done < 1000 {
        let field = random_field(&mut rng);
        let g = field.geometry();
        let mut settings = RenderSettings::new(
            rng.gen_range(0.01..0.06),
            rng.gen_range(0.05..0.3),
            rng.gen_range(2.0..3.0),
        );
        settings.shift = rng.gen_range(-6.0..0.0);
        settings.background = [rng.gen(), rng.gen(), rng.gen()];
        for _ in 0..50 {
            let dir = random_dir(&mut rng);
            let target =
                g.center(rng.gen_range(0..g.len())) + 0.5 * g.cell_size() * random_dir(&mut rng);
            let ray = Ray {
                origin: target - 1.2 * dir,
                direction: dir,
                pixel: (0, 0),
            };
            let got = render_ray(&field, &ray, &settings).unwrap();
            let (color, depth, weights, trans) = brute_force_render(&field, &ray, &settings);
            let mut err = (got.depth - depth)
                .abs()
                .max((got.transmittance - trans).abs());
            for c in 0..3 {
                err = err.max((got.color[c] - color[c]).abs());
            }
            assert_eq!(got.weights.len(), weights.len());
            for (a, b) in got.weights.iter().zip(&weights) {
                err = err.max((a - b).abs());
            }
            worst = worst.max(err);
            rays_done += 1;
            visible += usize::from(trans < 0.9);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && secs < 10.0 && visible > 100,
        format!("max abs error {worst:.2e} over {rays_done} rays ({visible} with opacity > 0.1) in {secs:.2}s"),
    )
}

// ---------------------------------------------------------------------------
// 2. compositing weights plus leftover transmittance sum to one

fn criterion_2() -> Outcome {
    let spec = SynthSpec {
        width: 64,
        height: 64,
        voxel_size: 1.0 / 32.0,
        ..SynthSpec::default()
    };
    let scene = generate_synthetic_scene(2, &spec).unwrap();
    let field = scene.ground_truth.as_ref().unwrap();
    let settings = spec.render_settings();
    let camera = &scene.novel[0].camera;
    let rays = generate_rays(camera, &all_pixels(camera)).unwrap();
    let mut worst = 0.0f64;
    let mut hit = 0;
    for ray in &rays {
        let r = render_ray(field, ray, &settings).unwrap();
        let total: f64 = r.weights.iter().sum::<f64>() + r.transmittance;
        worst = worst.max((total - 1.0).abs());
        hit += usize::from(r.transmittance < 0.5);
    }
    outcome(
        worst <= 1e-6 && rays.len() == 64 * 64 && hit > 0,
        format!(
            "max |sum - 1| {worst:.2e} over {} rays ({hit} opaque)",
            rays.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. sparse operators against dense and brute-force references

fn offsets_ref(kernel: i32) -> Vec<[i32; 3]> {
    let lo = if kernel % 2 == 1 { -(kernel / 2) } else { 0 };
    let mut out = Vec::new();
    for x in lo..lo + kernel {
        for y in lo..lo + kernel {
            for z in lo..lo + kernel {
                out.push([x, y, z]);
            }
        }
    }
    out
}

fn random_sparse(
    rng: &mut ChaCha8Rng,
    grid: i32,
    n: usize,
    channels: usize,
    stride: i32,
) -> SparseTensor {
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert([0, 1, 2].map(|_| rng.gen_range(0..grid) * stride));
    }
    let coords: Vec<Coord> = set.into_iter().collect();
    let feats = (0..coords.len() * channels)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    SparseTensor::new(coords, feats, channels, stride).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, kernel: usize, c_in: usize, c_out: usize) -> ConvWeights {
    let w = (0..kernel.pow(3) * c_in * c_out)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    ConvWeights::new(kernel, c_in, c_out, w, None).unwrap()
}

/// Dense correlation over a zero-padded `grid^3` array, read at `at`.
fn dense_conv(x: &SparseTensor, grid: i32, w: &ConvWeights, at: &Coord) -> Vec<f64> {
    let s = x.stride();
    let (c_in, c_out) = (w.c_in, w.c_out);
    let pad = 2;
    let side = (grid + 2 * pad) as usize;
    let mut dense = vec![0.0; side * side * side * c_in];
    let idx = |g: [i32; 3]| {
        ((g[0] + pad) as usize * side + (g[1] + pad) as usize) * side + (g[2] + pad) as usize
    };
    for (r, c) in x.coords().iter().enumerate() {
        let g = c.map(|v| v / s);
        dense[idx(g) * c_in..(idx(g) + 1) * c_in].copy_from_slice(x.feat(r));
    }
    let base = at.map(|v| v / s);
    let mut out = vec![0.0; c_out];
    for (k, d) in offsets_ref(w.kernel as i32).iter().enumerate() {
        let g = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
        if g.iter().any(|&v| v < -pad || v >= grid + pad) {
            continue;
        }
        for ci in 0..c_in {
            let xv = dense[idx(g) * c_in + ci];
            for (co, o) in out.iter_mut().enumerate() {
                *o += xv * w.weights[(k * c_in + ci) * c_out + co];
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut conv_err = 0.0f64;
    let mut adj_err = 0.0f64;
    let mut coord_mismatches = 0;
    for trial in 0..24 {
        let grid = rng.gen_range(3..=8);
        let n = rng.gen_range(1..=(grid * grid * grid / 2).max(1)) as usize;
        let kernel = if trial % 2 == 0 { 3 } else { 2 };
        let (c_in, c_out) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let x = random_sparse(&mut rng, grid, n, c_in, 1);
        let w = random_weights(&mut rng, kernel, c_in, c_out);

        // stride 1 keeps the coordinates
        let y = sparse_conv(&x, &w, kernel, 1).unwrap();
        for (r, c) in y.coords().iter().enumerate() {
            let want = dense_conv(&x, grid, &w, c);
            for (a, b) in y.feat(r).iter().zip(&want) {
                conv_err = conv_err.max((a - b).abs());
            }
        }
        // stride 2 samples the dense result at the coarse coordinates
        let y2 = sparse_conv(&x, &w, kernel, 2).unwrap();
        let want_coords: BTreeSet<Coord> = x
            .coords()
            .iter()
            .map(|c| c.map(|v| v.div_euclid(2) * 2))
            .collect();
        let got_coords: BTreeSet<Coord> = y2.coords().iter().copied().collect();
        coord_mismatches += usize::from(want_coords != got_coords);
        for (r, c) in y2.coords().iter().enumerate() {
            let want = dense_conv(&x, grid, &w, c);
            for (a, b) in y2.feat(r).iter().zip(&want) {
                conv_err = conv_err.max((a - b).abs());
            }
        }

        // <conv(x), y> == <x, conv^T(y)>
        let yv: Vec<f64> = (0..y2.len() * c_out)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let yt = SparseTensor::from_set(y2.coord_set().clone(), yv, c_out).unwrap();
        let vol = kernel.pow(3);
        let mut wt = vec![0.0; w.weights.len()];
        for k in 0..vol {
            for ci in 0..c_in {
                for co in 0..c_out {
                    wt[(k * c_out + co) * c_in + ci] = w.weights[(k * c_in + ci) * c_out + co];
                }
            }
        }
        let wt = ConvWeights::new(kernel, c_out, c_in, wt, None).unwrap();
        let back = generative_transposed_conv(&yt, &wt, kernel, 2).unwrap();
        let lhs: f64 = y2.feats().iter().zip(yt.feats()).map(|(a, b)| a * b).sum();
        let mut rhs = 0.0;
        for (r, c) in x.coords().iter().enumerate() {
            if let Some(q) = back.coord_set().row_of(c) {
                rhs += x
                    .feat(r)
                    .iter()
                    .zip(back.feat(q))
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
        }
        adj_err = adj_err.max((lhs - rhs).abs());

        // generated coordinates are exactly the union of offset copies
        for up in [1, 2] {
            let coarse = random_sparse(&mut rng, grid.min(5), n.min(20), 1, 2);
            let g = generative_transposed_conv(
                &coarse,
                &random_weights(&mut rng, kernel, 1, 1),
                kernel,
                up,
            )
            .unwrap();
            let s = 2 / up;
            let mut want = BTreeSet::new();
            for c in coarse.coords() {
                for d in offsets_ref(kernel as i32) {
                    want.insert([c[0] + s * d[0], c[1] + s * d[1], c[2] + s * d[2]]);
                }
            }
            let got: BTreeSet<Coord> = g.coords().iter().copied().collect();
            coord_mismatches += usize::from(got != want || got.len() != g.len());
        }
    }
    outcome(
        conv_err <= 1e-6 && adj_err <= 1e-6 && coord_mismatches == 0,
        format!(
            "dense {conv_err:.2e}, adjoint {adj_err:.2e}, coordinate mismatches {coord_mismatches}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. end-to-end gradient against central differences

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let voxel = 0.1;
    // 3x3x3 block of colored voxels
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    for x in 0..3 {
        for y in 0..3 {
            for z in 0..3 {
                coords.push([x, y, z]);
                feats.extend((0..3).map(|_| rng.gen_range(0.1..0.9)));
            }
        }
    }
    let input = SparseTensor::new(coords, feats, 3, 1).unwrap();
    let net_cfg = NetConfig {
        encoder_channels: vec![2, 3, 3],
        decoder_channels: vec![3, 2],
        ..NetConfig::default()
    };
    let params = NetParams::init(&net_cfg, 4).unwrap();

    // a 4x4 patch looking at the block
    let center = Vec3::repeat(1.5 * voxel);
    let eye = center + Vec3::new(0.9, -0.4, 0.3);
    let pose = Pose::look_at(eye, center, Vec3::z()).unwrap();
    let camera = Camera::with_fov(4, 4, 0.5, pose).unwrap();
    let rays = generate_rays(&camera, &all_pixels(&camera)).unwrap();
    let n = rays.len();
    let batch = Arc::new(PatchBatch {
        size: 4,
        patches: vec![Patch {
            view: 0,
            row: 0,
            col: 0,
        }],
        color: (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect(),
        depth: (0..n).map(|_| rng.gen_range(0.8..1.1)).collect(),
        depth_valid: (0..n).map(|i| i % 5 != 0).collect(),
        rays,
    });
    let loss_cfg = LossConfig {
        lambda_depth: 0.1,
        lambda_percep: 0.5,
        lambda_stage: vec![0.5, 1.0],
        percep_levels: 2,
    };
    let extractor: Arc<dyn FeatureExtractor> = Arc::new(GradientPyramid::new(2));
    let eval = |p: &NetParams, grad: bool| {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let out = forward(&mut tape, &input, &bound, &net_cfg, voxel).unwrap();
        let mut preds = Vec::new();
        for stage in &out.stages {
            let geom = Arc::new(stage.geometry(voxel, Vec3::zeros()).unwrap());
            let mut s = RenderSettings::for_cell(voxel * stage.stride as f64, 0.4, 1.6);
            s.shift = net_cfg.density_shift;
            preds.push(
                render_rays_on_tape(
                    &mut tape,
                    stage.feats,
                    geom,
                    Arc::new(batch.rays.clone()),
                    &s,
                )
                .unwrap(),
            );
        }
        let loss = total_loss_on_tape(&mut tape, &preds, &batch, &loss_cfg, &extractor).unwrap();
        let g = grad.then(|| bound.flat_grad(&tape, &tape.backward(loss).unwrap()));
        (tape.value(loss).item().unwrap(), g)
    };
    let (_, g) = eval(&params, true);
    let analytic = g.unwrap();
    let x0 = params.flat();
    let mut p = params.clone();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..x0.len() {
        let mut x = x0.clone();
        x[i] = x0[i] + eps;
        p.set_flat(&x).unwrap();
        let fp = eval(&p, false).0;
        x[i] = x0[i] - eps;
        p.set_flat(&x).unwrap();
        let fm = eval(&p, false).0;
        let numeric = (fp - fm) / (2.0 * eps);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-3 && secs < 60.0,
        format!(
            "max relative error {worst:.2e} over {} parameters, {} voxels, {n} rays, {secs:.1}s",
            x0.len(),
            input.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. spherical harmonics

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut basis_err = 0.0f64;
    for _ in 0..100 {
        let d = random_dir(&mut rng);
        let got = sh_basis(&d).unwrap();
        for (a, b) in got.iter().zip(sh_closed_form(&d)) {
            basis_err = basis_err.max((a - b).abs());
        }
    }
    let mut dc_dev = 0.0f64;
    let mut color_dev = 0.0f64;
    for _ in 0..20 {
        let mut k = [0.0; 27];
        for c in 0..3 {
            k[c * SH_BASIS] = rng.gen_range(-3.0..3.0);
        }
        let reference = sh_logits(&k, &sh_basis(&Vec3::z()).unwrap());
        let ref_color = sh_to_color(&k, &Vec3::z()).unwrap();
        for _ in 0..100 {
            let d = random_dir(&mut rng);
            let l = sh_logits(&k, &sh_basis(&d).unwrap());
            let c = sh_to_color(&k, &d).unwrap();
            for i in 0..3 {
                dc_dev = dc_dev.max((l[i] - reference[i]).abs());
                color_dev = color_dev.max((c[i] - ref_color[i]).abs());
            }
        }
    }
    outcome(
        basis_err <= 1e-9 && dc_dev < 1e-9 && color_dev < 1e-9,
        format!("basis {basis_err:.2e}, DC logit deviation {dc_dev:.2e}, color deviation {color_dev:.2e}"),
    )
}

// ---------------------------------------------------------------------------
// training runs shared by 6 to 9

const VOXEL: f64 = 1.0 / 32.0;

fn desk_spec() -> SynthSpec {
    SynthSpec {
        voxel_size: VOXEL,
        width: 96,
        height: 96,
        ..SynthSpec::default()
    }
}

fn desk_net() -> NetConfig {
    NetConfig {
        encoder_channels: vec![8, 16, 32, 32],
        decoder_channels: vec![32, 16, 16],
        pruning: true,
        ..NetConfig::default()
    }
}

fn desk_config(epochs: usize, decay: Vec<usize>, augment_prob: f64) -> TrainConfig {
    let (near, far) = desk_spec().render_range();
    TrainConfig {
        epochs,
        decay_epochs: decay,
        patch_size: 16,
        voxel_size: VOXEL,
        near,
        far,
        augment_prob,
        loss: LossConfig {
            percep_levels: 2,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

struct Fit {
    net: NetConfig,
    config: TrainConfig,
    params: NetParams,
    secs: f64,
}

impl Fit {
    fn run(scenes: &[Scene], net: NetConfig, config: TrainConfig) -> Fit {
        let start = Instant::now();
        let mut trainer = Trainer::new(net.clone(), config.clone()).unwrap();
        let mut log = TrainLog::default();
        trainer.run(scenes, None, &mut log).unwrap();
        Fit {
            net,
            config,
            params: trainer.into_params(),
            secs: start.elapsed().as_secs_f64(),
        }
    }

    fn field(&self, scene: &Scene) -> RadianceField {
        bake(&self.params, &self.net, scene, &self.config).unwrap()
    }

    fn settings(&self, field: &RadianceField) -> RenderSettings {
        let mut s = self.config.render_settings(field.stride());
        s.shift = self.net.density_shift;
        s
    }

    fn seen(&self, scene: &Scene) -> Vec<ViewMetrics> {
        let f = self.field(scene);
        evaluate_views(&f, &scene.seen, &self.settings(&f)).unwrap()
    }

    fn held_out(&self, scene: &Scene) -> Vec<ViewMetrics> {
        self.score(scene, &scene.novel)
    }

    fn score(&self, scene: &Scene, frames: &[RgbdFrame]) -> Vec<ViewMetrics> {
        let f = self.field(scene);
        evaluate_views(&f, frames, &self.settings(&f)).unwrap()
    }
}

fn psnr(v: &[ViewMetrics]) -> f64 {
    mean(v.iter().map(|m| m.psnr))
}

const SINGLE_EPOCHS: usize = 4000;
const SINGLE_DECAY: [usize; 2] = [3200, 3800];

fn single_fit(scene: &Scene) -> Fit {
    Fit::run(
        std::slice::from_ref(scene),
        desk_net(),
        desk_config(SINGLE_EPOCHS, SINGLE_DECAY.to_vec(), 0.0),
    )
}

struct Shared {
    scene: Scene,
    fit: Fit,
}

fn criterion_6(shared: &mut Option<Shared>) -> Outcome {
    let scene = generate_synthetic_scene(6, &desk_spec()).unwrap();
    let fit = single_fit(&scene);
    let seen = psnr(&fit.seen(&scene));
    let held = fit.held_out(&scene);
    let held_psnr = psnr(&held);
    let depth = held[0].depth_error.unwrap_or(f64::INFINITY);
    let secs = fit.secs;
    *shared = Some(Shared { scene, fit });
    outcome(
        seen >= 30.0 && held_psnr >= 18.0 && depth <= 0.01 && secs <= 1800.0,
        format!("seen PSNR {seen:.2} dB, held-out PSNR {held_psnr:.2} dB, held-out depth MSE {depth:.4}, {secs:.0}s"),
    )
}

const MULTI_EPOCHS: usize = 200;
const MULTI_DECAY: usize = 170;
const TRAIN_SEEDS: std::ops::Range<u64> = 100..108;
const NOVEL_SEEDS: std::ops::Range<u64> = 200..202;

struct Multi {
    novel: Vec<Scene>,
    with_aug: f64,
    without_aug: f64,
}

fn multi_runs() -> Multi {
    let spec = desk_spec();
    let train: Vec<Scene> = TRAIN_SEEDS
        .map(|s| generate_synthetic_scene(s, &spec).unwrap())
        .collect();
    let novel: Vec<Scene> = NOVEL_SEEDS
        .map(|s| generate_synthetic_scene(s, &spec).unwrap())
        .collect();
    let score = |aug: f64| {
        let fit = Fit::run(
            &train,
            desk_net(),
            desk_config(MULTI_EPOCHS, vec![MULTI_DECAY], aug),
        );
        let p = mean(novel.iter().map(|s| psnr(&fit.held_out(s))));
        eprintln!("  multi-scene run, augmentation {aug}: held-out PSNR {p:.2} dB on novel scenes, {:.0}s", fit.secs);
        p
    };
    let with_aug = score(0.5);
    let without_aug = score(0.0);
    Multi {
        novel,
        with_aug,
        without_aug,
    }
}

fn criterion_7(multi: &Multi) -> Outcome {
    let singles: Vec<f64> = multi
        .novel
        .iter()
        .map(|s| {
            let p = psnr(&single_fit(s).held_out(s));
            eprintln!("  single-scene fit of {}: held-out PSNR {p:.2} dB", s.id);
            p
        })
        .collect();
    let single = mean(singles.iter().copied());
    let gap = multi.with_aug - single;
    outcome(
        gap.abs() <= 3.0,
        format!(
            "multi-scene held-out PSNR {:.2} dB vs single-scene {single:.2} dB (difference {gap:+.2} dB)",
            multi.with_aug
        ),
    )
}

const SH_EPOCHS: usize = 2000;

/// Unseen ring views halfway between the capture cameras, rendered from ground truth.
fn between_views(scene: &Scene, spec: &SynthSpec) -> Vec<RgbdFrame> {
    let gt = scene.ground_truth.as_ref().unwrap();
    let p = scene.seen[0].camera.origin();
    let phase = p.y.atan2(p.x);
    (0..spec.cameras)
        .map(|i| {
            let a = phase + 2.0 * PI * (i as f64 + 0.5) / spec.cameras as f64;
            let eye = Vec3::new(
                spec.camera_radius * a.cos(),
                spec.camera_radius * a.sin(),
                spec.camera_height,
            );
            let pose = Pose::look_at(eye, Vec3::zeros(), Vec3::z()).unwrap();
            let cam =
                Camera::with_fov(spec.width, spec.height, spec.fov_deg.to_radians(), pose).unwrap();
            let (rgb, depth) = render_view(gt, &cam, &spec.render_settings()).unwrap();
            RgbdFrame::new(rgb.map(|v| v.clamp(0.0, 1.0)), depth, cam).unwrap()
        })
        .collect()
}

fn criterion_8(multi: &Multi) -> Outcome {
    let aug_gain = multi.with_aug - multi.without_aug;
    let spec = SynthSpec {
        view_dependent: true,
        ..desk_spec()
    };
    let scene = generate_synthetic_scene(8, &spec).unwrap();
    let mut unseen = scene.novel.clone();
    unseen.extend(between_views(&scene, &spec));
    let fit_with = |degree: usize| {
        let net = NetConfig {
            sh_degree: degree,
            ..desk_net()
        };
        let fit = Fit::run(
            std::slice::from_ref(&scene),
            net,
            desk_config(SH_EPOCHS, vec![SH_EPOCHS * 9 / 10], 0.5),
        );
        psnr(&fit.score(&scene, &unseen))
    };
    let deg2 = fit_with(2);
    let dc = fit_with(0);
    outcome(
        aug_gain > 0.0 && deg2 > dc,
        format!(
            "augmentation gain {aug_gain:+.2} dB ({:.2} vs {:.2}); held-out PSNR degree 2 {deg2:.2} dB vs DC {dc:.2} dB",
            multi.with_aug, multi.without_aug
        ),
    )
}

fn criterion_9(shared: &Option<Shared>) -> Outcome {
    let fallback;
    let (scene, fit) = match shared {
        Some(s) => (&s.scene, &s.fit),
        None => {
            let scene = generate_synthetic_scene(6, &desk_spec()).unwrap();
            let net = desk_net();
            let config = desk_config(1, vec![], 0.0);
            let params = NetParams::init(&net, 0).unwrap();
            fallback = (
                scene,
                Fit {
                    net,
                    config,
                    params,
                    secs: 0.0,
                },
            );
            (&fallback.0, &fallback.1)
        }
    };
    let field = fit.field(scene);
    let settings = fit.settings(&field);
    let camera = scene.novel[0].camera.clone();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let calls = net::forward_calls();
    let start = Instant::now();
    let (rgb, _) = pool
        .install(|| render_view(&field, &camera, &settings))
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let extra = net::forward_calls() - calls;
    outcome(
        extra == 0 && secs < 2.0 && rgb.width() == 96 && rgb.height() == 96,
        format!("{extra} network calls, 96x96 render in {secs:.3}s on one thread"),
    )
}

// ---------------------------------------------------------------------------
// 10. file formats and resumable training

fn criterion_10() -> Outcome {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);

    let field = random_field(&mut rng);
    let bytes = io::encode_field(&field);
    let back = io::decode_field(&bytes).unwrap();
    if back != field || io::encode_field(&back) != bytes {
        failures.push("field");
    }

    let spec = SynthSpec {
        width: 32,
        height: 32,
        voxel_size: 1.0 / 16.0,
        cameras: 4,
        ..SynthSpec::default()
    };
    let scene = generate_synthetic_scene(10, &spec).unwrap();
    let (near, far) = spec.render_range();
    let net = NetConfig {
        encoder_channels: vec![4, 8, 8],
        decoder_channels: vec![8, 8],
        pruning: true,
        ..NetConfig::default()
    };
    let config = TrainConfig {
        epochs: 6,
        decay_epochs: vec![4],
        patch_size: 8,
        voxel_size: spec.voxel_size,
        near,
        far,
        augment_prob: 0.0,
        loss: LossConfig {
            percep_levels: 2,
            lambda_stage: vec![0.5, 1.0],
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    let scenes = [scene.clone()];

    let mut full = Trainer::new(net.clone(), config.clone()).unwrap();
    let mut full_log = TrainLog::default();
    full.run(&scenes, None, &mut full_log).unwrap();

    let mut first = Trainer::new(net, config).unwrap();
    let mut log = TrainLog::default();
    first.run_until(3, &scenes, None, &mut log).unwrap();
    let ckpt = first.checkpoint();
    let bytes = io::encode_checkpoint(&ckpt).unwrap();
    let decoded = io::decode_checkpoint(&bytes).unwrap();
    if decoded != ckpt || io::encode_checkpoint(&decoded).unwrap() != bytes {
        failures.push("checkpoint");
    }
    let mut resumed = Trainer::from_checkpoint(decoded).unwrap();
    resumed.run(&scenes, None, &mut log).unwrap();
    let a: Vec<u64> = full_log.losses().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = log.losses().iter().map(|v| v.to_bits()).collect();
    if a != b || a.len() != 6 {
        failures.push("resumed loss sequence");
    }
    if io::encode_checkpoint(&full.checkpoint()).unwrap()
        != io::encode_checkpoint(&resumed.checkpoint()).unwrap()
    {
        failures.push("resumed checkpoint");
    }

    let dir = tempfile::tempdir().unwrap();
    let (d1, d2) = (dir.path().join("a"), dir.path().join("b"));
    io::save_scene(&d1, &scene, 1e-3).unwrap();
    let loaded = io::load_scene(&d1).unwrap();
    io::save_scene(&d2, &loaded, 1e-3).unwrap();
    let reloaded = io::load_scene(&d2).unwrap();
    let mut same_files = reloaded == loaded;
    for entry in std::fs::read_dir(&d1).unwrap() {
        let name = entry.unwrap().file_name();
        same_files &=
            std::fs::read(d1.join(&name)).unwrap() == std::fs::read(d2.join(&name)).unwrap();
    }
    if !same_files || loaded.ground_truth != scene.ground_truth {
        failures.push("dataset");
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "field, checkpoint and dataset round-trip bit-exactly; resumed losses match".into()
        } else {
            format!("mismatch in {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let wanted = |n: usize| args.is_empty() || args.iter().any(|a| a == &n.to_string());
    let names = [
        "rendering matches brute-force evaluator",
        "weights plus final transmittance sum to one",
        "sparse operators match dense references",
        "end-to-end gradient matches finite differences",
        "spherical harmonics basis and DC view independence",
        "desk-scale single-scene fit",
        "multi-scene generalization",
        "augmentation and SH degree ablations",
        "baked rendering is network-free and fast",
        "format round-trips and resumable training",
    ];
    let mut shared = None;
    let mut multi = None;
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let out = match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(&mut shared),
            7 => criterion_7(multi.get_or_insert_with(multi_runs)),
            8 => criterion_8(multi.get_or_insert_with(multi_runs)),
            9 => criterion_9(&shared),
            _ => criterion_10(),
        };
        failed += usize::from(!out.pass);
        println!(
            "criterion {n:>2} {} {name}: {} [{:.1}s]",
            if out.pass { "PASS" } else { "FAIL" },
            out.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
