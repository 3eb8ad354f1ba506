use nvib_core::gradcheck::{self, WeightFunctional};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn all_deterministic_kernels_certify() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for rep in [
        gradcheck::check_kl_dirichlet(200, &mut rng),
        gradcheck::check_kl_gaussian(200, &mut rng),
        gradcheck::check_project_dp_params(200, &mut rng),
        gradcheck::check_denoising_attention_train(200, &mut rng),
        gradcheck::check_denoising_attention_test(200, &mut rng),
    ] {
        println!("{rep:?}");
        assert!(rep.passed, "{rep:?}");
    }
}

#[test]
fn sampling_gradient_matches_crn_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for f in [WeightFunctional::SquaredNorm, WeightFunctional::Entropy] {
        let cmp = gradcheck::compare_sampling_gradient(&[0.6, 1.7, 3.2], f, 100_000, &mut rng);
        println!("{f:?} {cmp:?}");
        assert!(cmp.z_scores.iter().all(|&z| z < 3.0), "{cmp:?}");
    }
}
