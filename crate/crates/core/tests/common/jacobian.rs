//! Central-difference reference for the photometric Jacobian.

use compvo::gauss_newton::PhotometricProblem;
use compvo::synth::{SceneConfig, SyntheticScene};
use compvo::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut impl Rng, rot: f64, trans: f64) -> SE3 {
    let mut a = [0.0; 6];
    for (i, v) in a.iter_mut().enumerate() {
        let s = if i < 3 { rot } else { trans };
        *v = rng.gen_range(-s..s);
    }
    SE3::from_twist(&Twist::from_array(a)).unwrap()
}

/// Reference Jacobian by central differences of the residual under
/// `exp(±h·e_i) · pose`. Pixels whose stencil crosses a bilinear cell
/// boundary are skipped: the interpolant has a kink there.
/// Returns the worst relative error and the number of pixels compared.
pub fn finite_difference_check(seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SceneConfig {
        seed,
        slope_x: rng.gen_range(-0.2..0.2),
        slope_y: rng.gen_range(-0.2..0.2),
        ..SceneConfig::default()
    };
    let scene = SyntheticScene::from_config(&cfg).unwrap();
    let k = scene.intrinsics;
    let (target, depth) = scene.render(&SE3::identity()).unwrap();
    let (src, _) = scene.render(&random_pose(&mut rng, 0.01, 0.1)).unwrap();
    let ones = Plane::filled(k.width, k.height, 1.0).unwrap();
    let problem = PhotometricProblem::new(&target, src.plane(), &ones, &depth, &k).unwrap();
    let pose = random_pose(&mut rng, 0.01, 0.05);
    let lin = problem.linearize(&pose);

    let h = 1e-5;
    let perturbed = |i: usize, sign: f64| {
        let mut a = [0.0; 6];
        a[i] = sign * h;
        compose(&SE3::from_twist(&Twist::from_array(a)).unwrap(), &pose)
    };
    let plus: Vec<_> = (0..6).map(|i| problem.residuals(&perturbed(i, 1.0))).collect();
    let minus: Vec<_> = (0..6).map(|i| problem.residuals(&perturbed(i, -1.0))).collect();

    // cell index of every pixel's projection under each pose
    let cell_of = |p: &SE3| -> Vec<Option<(i64, i64)>> {
        let mut out = Vec::new();
        for y in 0..k.height {
            for x in 0..k.width {
                let d = depth.get(x, y).unwrap();
                let q = p.apply(&k.backproject(x as f64, y as f64, d).unwrap());
                out.push(k.project(&q).map(|(u, v)| (u.floor() as i64, v.floor() as i64)));
            }
        }
        out
    };
    let centre_cells = cell_of(&pose);
    let stencil_cells: Vec<_> = (0..6).flat_map(|i| [cell_of(&perturbed(i, 1.0)), cell_of(&perturbed(i, -1.0))]).collect();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (p, entry) in lin.iter().enumerate() {
        let Some((_, ja)) = entry else { continue };
        if stencil_cells.iter().any(|c| c[p] != centre_cells[p]) {
            continue;
        }
        let mut jfd = [0.0; 6];
        let mut ok = true;
        for i in 0..6 {
            match (plus[i][p], minus[i][p]) {
                (Some(a), Some(b)) => jfd[i] = (a - b) / (2.0 * h),
                _ => ok = false,
            }
        }
        if !ok {
            continue;
        }
        let jfd = nalgebra::Vector6::from_row_slice(&jfd);
        let scale = jfd.norm().max(ja.norm());
        if scale < 1e-8 {
            continue;
        }
        worst = worst.max((ja - jfd).norm() / scale);
        checked += 1;
    }
    (worst, checked)
}

