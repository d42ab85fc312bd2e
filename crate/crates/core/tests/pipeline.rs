use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tmcmc::diagnostics::{effective_sample_size, EssReport};
use tmcmc::mcmc::{run_adaptive, run_replicates, BasisSpec, ChainConfig, Sampler};
use tmcmc::optimizer::{fit_map, OptimizerConfig};
use tmcmc::problems::{BananaTarget, GaussianTarget};
use tmcmc::proposals::ReferenceProposal;
use tmcmc::samples::{read_samples, write_samples};
use tmcmc::{Execution, PolynomialFamily, SampleMatrix};

fn banana_config(exec: Execution) -> ChainConfig {
    ChainConfig {
        steps: 3000,
        burn_in: 500,
        seed: 17,
        proposal: ReferenceProposal::DelayedRejectionLocal { sigma1: 1.0, sigma2: 0.2 },
        basis: BasisSpec::total_order(2),
        execution: exec,
        ..ChainConfig::default()
    }
}

#[test]
fn sequential_and_parallel_chains_are_bit_identical() {
    let target = BananaTarget::default();
    let a = run_adaptive(&banana_config(Execution::Sequential), &target, &[0.0, 0.0]).unwrap();
    let b = run_adaptive(&banana_config(Execution::Parallel), &target, &[0.0, 0.0]).unwrap();
    assert_eq!(a.samples.as_flat(), b.samples.as_flat());
    assert_eq!(a.accepted_stage, b.accepted_stage);
    assert_eq!(a.final_map.unwrap().to_text(), b.final_map.unwrap().to_text());

    let seq = run_replicates(&banana_config(Execution::Sequential), Sampler::TransportMap, &target, &[0.0, 0.0], 3, Execution::Sequential);
    let par = run_replicates(&banana_config(Execution::Sequential), Sampler::TransportMap, &target, &[0.0, 0.0], 3, Execution::Parallel);
    for (i, (s, p)) in seq.iter().zip(&par).enumerate() {
        let (s, p) = (s.as_ref().unwrap(), p.as_ref().unwrap());
        assert_eq!(s.seed, 17 + i as u64);
        assert_eq!(s.samples.as_flat(), p.samples.as_flat());
    }
}

#[test]
fn quadratic_map_recovers_the_banana_transform() {
    let target = BananaTarget::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<[f64; 2]> = (0..20_000).map(|_| target.sample(&mut rng)).collect();
    let samples = SampleMatrix::from_rows(2, &rows).unwrap();
    let sets = BasisSpec::total_order(2).build(2).unwrap();
    let fit = fit_map(&samples, sets, PolynomialFamily::Hermite, &OptimizerConfig::default(), None, Execution::Parallel).unwrap();
    // exact transform: r1 = theta1, r2 = theta2 + theta1^2 - 1
    for th in [[0.5, 0.3], [-1.0, 1.5], [1.5, -0.5]] {
        let r = fit.map.forward(&th).unwrap();
        let expect = [th[0], th[1] + th[0] * th[0] - 1.0];
        assert!((r[0] - expect[0]).abs() < 0.05 && (r[1] - expect[1]).abs() < 0.05, "{th:?}: {r:?}");
        let back = fit.map.inverse(&r).unwrap();
        assert!((back[0] - th[0]).abs() < 1e-9 && (back[1] - th[1]).abs() < 1e-9);
    }
}

#[test]
fn gaussian_chain_recovers_moments() {
    let g = GaussianTarget::correlated_2d();
    let cfg = ChainConfig {
        steps: 20_000,
        burn_in: 2000,
        seed: 5,
        proposal: ReferenceProposal::DelayedRejectionGlobal { sigma2: 0.5 },
        basis: BasisSpec::total_order(1),
        keep_maps: false,
        ..ChainConfig::default()
    };
    let res = run_adaptive(&cfg, &g, &[2.0, -2.0]).unwrap();
    let post = res.post_burn_in();
    let x = post.column(0);
    let y = post.column(1);
    let n = x.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (mx, my) = (mean(&x), mean(&y));
    for (m, v) in [(mx, &x), (my, &y)] {
        let se = (1.0 / effective_sample_size(v).unwrap()).sqrt();
        assert!(m.abs() < 4.0 * se, "mean {m} se {se}");
    }
    let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    assert!((cov - 0.5).abs() < 0.1, "{cov}");
    assert!(res.acceptance_rate() > 0.5);
}

#[test]
fn chain_output_roundtrips_through_text_and_reports() {
    let res = run_adaptive(&banana_config(Execution::Sequential), &BananaTarget::default(), &[0.0, 0.0]).unwrap();
    let text = write_samples(&res.samples, res.seed);
    let (h, s) = read_samples(&text).unwrap();
    let h = h.unwrap();
    assert_eq!((h.dim, h.steps, h.seed), (2, 3000, 17));
    assert_eq!(s.as_flat(), res.samples.as_flat());

    let rep = EssReport::from_chain(&res).unwrap();
    assert_eq!(rep.post_burn_in, 2500);
    assert_eq!(rep.evaluations, res.total_evaluations());
    assert!((rep.ess_per_eval - rep.min_ess / rep.evaluations as f64).abs() < 1e-15);
    assert_eq!(rep.tau_max, rep.tau.iter().cloned().fold(f64::MIN, f64::max));
}
