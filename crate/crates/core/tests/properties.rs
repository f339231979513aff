use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svfreg::metrics::{count_folding, dice, inverse_consistency};
use svfreg::loss::kl_term;
use svfreg::prob::{degrees, laplacian_apply, prior_energy};
use svfreg::surface::distance_transform;
use svfreg::transform::{compose, warp_image};
use svfreg::*;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    (1usize..7, 1usize..7, 1usize..7).prop_map(|(x, y, z)| [x, y, z])
}

fn random_field(grid: GridSpec, scale: f64, seed: u64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..grid.len())
        .map(|_| [0; 3].map(|_: i32| scale * (rng.random::<f64>() * 2.0 - 1.0)))
        .collect();
    VectorField::new(grid, v).unwrap()
}

fn brute_force_distance(grid: &GridSpec, mask: &[bool], i: usize) -> f64 {
    let p = grid.point(i);
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(j, _)| {
            let q = grid.point(j);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #[test]
    fn index_coords_round_trip(d in dims(), seed in any::<u64>()) {
        let g = GridSpec::new(d).unwrap();
        let i = (seed as usize) % g.len();
        let [x, y, z] = g.coords(i);
        prop_assert_eq!(g.index(x, y, z), i);
    }

    #[test]
    fn compose_with_zero_is_identity(d in dims(), seed in any::<u64>()) {
        let g = GridSpec::new(d).unwrap();
        let a = random_field(g, 2.0, seed);
        let zero = VectorField::zeros(g);
        prop_assert_eq!(compose(&a, &zero).unwrap(), a.clone());
        prop_assert_eq!(compose(&zero, &a).unwrap(), a);
    }

    #[test]
    fn affine_images_resample_exactly(
        c in prop::array::uniform3(-1.0f64..1.0),
        shift in prop::array::uniform3(-0.9f64..0.9),
    ) {
        // trilinear interpolation reproduces affine functions inside the domain
        let g = GridSpec::cube(6).unwrap();
        let img = Volume::from_fn(g, |[x, y, z]| c[0] * x as f64 + c[1] * y as f64 + c[2] * z as f64);
        let phi = VectorField::constant(g, shift);
        let out = warp_image(&img, &phi).unwrap();
        for i in 0..g.len() {
            let p = g.point(i);
            let q = [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]];
            if q.iter().all(|&v| (0.0..=5.0).contains(&v)) {
                let want = c[0] * q[0] + c[1] * q[1] + c[2] * q[2];
                prop_assert!((out.values()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_transform_matches_brute_force(d in dims(), seed in any::<u64>(), density in 0.02f64..0.5) {
        let g = GridSpec::new(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mask: Vec<bool> = (0..g.len()).map(|_| rng.random::<f64>() < density).collect();
        mask[(seed as usize) % g.len()] = true;
        let vol = Volume::new(g, mask.iter().map(|&m| f64::from(u8::from(m))).collect()).unwrap();
        let dt = distance_transform(&vol).unwrap();
        for i in 0..g.len() {
            prop_assert!((dt.values()[i] - brute_force_distance(&g, &mask, i)).abs() < 1e-9);
        }
    }

    #[test]
    fn prior_energy_is_a_neighbour_sum(d in dims(), seed in any::<u64>(), lambda in 0.1f64..50.0) {
        let g = GridSpec::new(d).unwrap();
        let mu = random_field(g, 3.0, seed);
        let prior = PriorParams::new(lambda).unwrap();
        let mut expansion = 0.0;
        for i in 0..g.len() {
            let c = g.coords(i);
            for axis in 0..3 {
                if c[axis] + 1 < g.dims[axis] {
                    let mut n = c;
                    n[axis] += 1;
                    let j = g.index(n[0], n[1], n[2]);
                    let (a, b) = (mu.vectors()[i], mu.vectors()[j]);
                    expansion += (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>();
                }
            }
        }
        expansion *= lambda;
        let quad: f64 = laplacian_apply(&prior, &mu)
            .vectors()
            .iter()
            .zip(mu.vectors())
            .map(|(l, m)| l[0] * m[0] + l[1] * m[1] + l[2] * m[2])
            .sum();
        let e = prior_energy(&prior, &mu);
        prop_assert!((e - expansion).abs() <= 1e-10 * expansion.max(1e-300));
        prop_assert!((e - quad).abs() <= 1e-10 * expansion.max(1e-300));
    }

    #[test]
    fn kl_is_minimised_at_inverse_degree_variance(d in dims(), lambda in 0.1f64..50.0) {
        let g = GridSpec::new(d).unwrap();
        let prior = PriorParams::new(lambda).unwrap();
        let deg = degrees(&g);
        prop_assume!(deg.iter().all(|&x| x > 0.0));
        let lv: Vec<Vec3> = deg.iter().map(|&k| [(1.0 / (lambda * k)).ln(); 3]).collect();
        let post = PosteriorParams::new(
            VectorField::zeros(g),
            VectorField::new(g, lv.clone()).unwrap(),
            CovarianceMode::Diagonal,
        ).unwrap();
        let base = kl_term(&post, &prior);
        for h in [1e-3, -1e-3] {
            let shifted: Vec<Vec3> = lv.iter().map(|v| v.map(|x| x + h)).collect();
            let p2 = PosteriorParams { log_var: VectorField::new(g, shifted).unwrap(), ..post.clone() };
            prop_assert!(kl_term(&p2, &prior) > base);
        }
    }

    #[test]
    fn self_dice_is_one(d in dims(), seed in any::<u64>()) {
        let g = GridSpec::new(d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u32> = (0..g.len()).map(|_| rng.random_range(0..4)).collect();
        let seg = SegmentationMap::new(g, labels).unwrap();
        let present: Vec<u32> = seg.present_labels().into_iter().filter(|&l| l != 0).collect();
        prop_assume!(!present.is_empty());
        let r = dice(&seg, &seg, &present).unwrap();
        prop_assert_eq!(r.mean, Some(1.0));
    }

    #[test]
    fn small_velocities_are_diffeomorphic(seed in any::<u64>(), mag in 0.0f64..1.5) {
        let g = GridSpec::cube(10).unwrap();
        let v = synth::random_smooth_velocity(g, mag, 2.0, seed).unwrap();
        let phi = integrate::exp_ss(&v, 7).unwrap();
        let phi_inv = integrate::exp_ss(&v.scaled(-1.0), 7).unwrap();
        prop_assert_eq!(count_folding(&phi), 0);
        prop_assert!(inverse_consistency(&phi, &phi_inv).unwrap().max < 0.5);
    }
}
