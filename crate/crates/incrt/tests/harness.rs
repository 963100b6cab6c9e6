use std::fs;

use incrt::harness::{
    exp1_report, exp2_report, exp3_report, gen_synthetic, run_checks, run_exp1, simulate, write_outputs,
    RunConfig,
};
use incrt::incrt::{coverage, CapturedSubspace, SignalWeighting};
use incrt::numerics::{antisym_dominant_plane, Rng};
use incrt::Error;

fn small() -> RunConfig {
    RunConfig {
        n_tokens: 150,
        dim: 12,
        n_blocks: 6,
        rho: 0.5,
        theta_w: 0.35,
        k_protos: 3,
        n_min: 60,
        max_heads: 5,
        max_steps: 1500,
        signal_weighting: SignalWeighting::Unweighted,
        ..RunConfig::default()
    }
}

#[test]
fn config_parses_over_defaults() {
    let cfg = RunConfig::parse("# comment\nseed = 7\n  dim = 128 # trailing\n\nprune_rule = spread\n").unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.dim, 128);
    assert_eq!(cfg.n_tokens, 500);
    assert_eq!(cfg.prune_rule, incrt::incrt::PruneRule::Spread);
    assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
}

#[test]
fn config_errors() {
    for text in [
        "bogus = 1",
        "seed = 1\nseed = 2",
        "seed = minus one",
        "seed 3",
        "phi_g = 0.1",
        "n_blocks = 40",
        "eta_t = 0.1",
        "signal_weighting = whitened",
    ] {
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text}");
    }
    let missing = std::path::Path::new("/nonexistent/incrt.cfg");
    assert!(matches!(RunConfig::load(missing), Err(Error::Io { .. })));
}

#[test]
fn generator_magnitudes_and_centring() {
    let cfg = RunConfig::default();
    let (z, _, mags) = gen_synthetic(&cfg, &mut Rng::new(0)).unwrap();
    for (m, expect) in mags.iter().zip([2.0, 1.4, 0.98]) {
        assert!((m - expect).abs() < 1e-12);
    }
    for c in 0..cfg.dim {
        let mean: f64 = z.matrix().col(c).iter().sum::<f64>() / cfg.n_tokens as f64;
        assert!(mean.abs() < 1e-12);
    }
}

#[test]
fn single_block_has_norm_lambda1() {
    let cfg = RunConfig {
        n_blocks: 1,
        ..RunConfig::default()
    };
    let (_, sig, _) = gen_synthetic(&cfg, &mut Rng::new(3)).unwrap();
    let top = antisym_dominant_plane(&sig.m_a).unwrap();
    assert!((top.sigma1 - 2.0).abs() < 1e-12);
}

#[test]
fn generator_is_deterministic() {
    let cfg = RunConfig::default();
    let (z1, s1, _) = gen_synthetic(&cfg, &mut Rng::new(11)).unwrap();
    let (z2, s2, _) = gen_synthetic(&cfg, &mut Rng::new(11)).unwrap();
    assert_eq!(z1, z2);
    let bits = |m: &incrt::numerics::Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&s1.m_a), bits(&s2.m_a));
}

#[test]
fn head_count_follows_the_generator_spectrum() {
    // Magnitudes 2, 1, 0.5, 0.25, ... with θ_w = 0.35: three exceed it.
    let sim = simulate(&small()).unwrap();
    assert_eq!(sim.trace.final_heads.len(), 3);
    let r = exp1_report(&sim).unwrap();
    assert_eq!(r.get("expected_heads"), Some(3.0));
    assert!(r.criterion("3").unwrap().detail.contains("heads 3 expected 3"));
}

#[test]
fn high_threshold_keeps_the_initial_head() {
    let cfg = RunConfig {
        theta_w: 2.5,
        phi_g: 0.01,
        max_steps: 400,
        ..small()
    };
    let sim = simulate(&cfg).unwrap();
    assert!(sim.trace.events.is_empty());
    let sub = CapturedSubspace::from_planes(cfg.dim, &[&sim.trace.final_heads[0].plane]).unwrap();
    let share = 2.0 * 4.0 / sim.sig.m_tilde.frobenius_sq();
    assert!((coverage(&sim.sig, &sub).unwrap() - share).abs() < 1e-9);

    let r2 = exp2_report(&sim).unwrap();
    let c4 = r2.criterion("4").unwrap();
    assert!(!c4.passed);
    assert!(c4.detail.contains("undefined"));
    let r3 = exp3_report(&sim).unwrap();
    assert!(r3.criterion("5").unwrap().detail.contains("insufficient heads"));
}

#[test]
fn outputs_have_fixed_headers_and_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_exp1(&small()).unwrap();
    write_outputs(&out, dir.path()).unwrap();
    let first_line = |name: &str| {
        fs::read_to_string(dir.path().join(name))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string()
    };
    assert_eq!(first_line("events.csv"), "step,kind,head_id,lambda,W_before,W_after,coverage");
    assert_eq!(first_line("temps.csv"), "step,head_id,T,sigma");
    assert_eq!(first_line("forces.csv"), "head_id,birth_lambda,T_final,F_sep,frac_F");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let keys: Vec<&str> = json.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    assert_eq!(keys, ["config", "criteria", "experiment", "metrics", "series", "validation"]);
    assert!(json["config"].get("out_dir").is_none());
}

#[test]
fn checks_catch_the_negative_controls() {
    let out = run_checks(&RunConfig::default()).unwrap();
    let r = &out.report;
    assert!(r.criterion("validation-negative-control").unwrap().passed);
    assert!(r.criterion("assignment-negative-control").unwrap().passed);
    for id in ["1", "2", "9", "10"] {
        assert!(r.criterion(id).is_some());
    }
}
