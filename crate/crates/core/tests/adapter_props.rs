use grpg_core::adapter::{run_prepared, AdapterParams, Prepared};
use grpg_core::backbone::SurrogateNpNet;
use grpg_core::config::Variant;
use grpg_core::seed::rng;
use grpg_core::selftest::{near_targets, small_config};
use grpg_core::synth::{gen_corpus, Corpus};
use grpg_core::training::{eval_loss, loss_and_grads};
use proptest::prelude::*;
use std::sync::OnceLock;

struct Fixture {
    net: SurrogateNpNet,
    corpus: Corpus,
    sigma_b: f64,
    params: AdapterParams,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config();
        let net = SurrogateNpNet::new(&cfg.surrogate, &cfg.dims).unwrap();
        let corpus = gen_corpus(&cfg.corpus, &cfg.dims).unwrap();
        let params = AdapterParams::for_surrogate(&cfg.adapter, &net).unwrap();
        Fixture {
            net,
            corpus,
            sigma_b: cfg.adapter.sigma_b,
            params,
        }
    })
}

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn blend_and_clamps_hold(seed in 0u64..1000, rec in 0usize..8, std in 0.0f64..3.0, v in variant()) {
        let f = fixture();
        let mut p = f.params.clone();
        p.jitter(std, &mut rng(seed));
        let r = &f.corpus.records[rec];
        let pr = &r.prompt;
        let prep = Prepared::new(&f.net, &r.z_t, &pr.e_g, &pr.e_k, &pr.hard_masks().unwrap(), f.sigma_b).unwrap();
        let out = run_prepared(&f.net, &p, v, &prep, None).unwrap();
        prop_assert!((0.0..=0.6).contains(&out.alpha));
        if !v.uses_confidence() {
            prop_assert!((out.alpha - 0.4).abs() < 1e-12);
        }
        if !v.uses_rca() {
            prop_assert!(out.z_swin.bitwise_eq(&prep.parts.z_g));
        }
        for i in 0..out.z_out.len() {
            let (s, fm, o) = (out.z_swin.data()[i], out.z_film.data()[i], out.z_out.data()[i]);
            prop_assert!((o - s - out.alpha * (fm - s)).abs() < 1e-12);
        }
        prop_assert!(out.gamma.data().iter().all(|g| (0.5..=1.5).contains(g)));
        prop_assert!(out.beta.data().iter().all(|b| b.abs() <= prep.tau));
    }

    #[test]
    fn tracking_does_not_change_the_value(seed in 0u64..1000, rec in 0usize..8, v in variant()) {
        let f = fixture();
        let mut p = f.params.clone();
        p.jitter(0.2, &mut rng(seed));
        let r = &f.corpus.records[rec];
        let pr = &r.prompt;
        let prep = Prepared::new(&f.net, &r.z_t, &pr.e_g, &pr.e_k, &pr.hard_masks().unwrap(), f.sigma_b).unwrap();
        let rec = near_targets(r, &prep.parts.z_g, seed);
        let cfg = small_config();
        let (a, _) = loss_and_grads(&f.net, &p, v, &prep, &rec, &cfg, 0.5, 0.7).unwrap();
        let b = eval_loss(&f.net, &p, v, &prep, &rec, &cfg, 0.5, 0.7).unwrap();
        prop_assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
}

#[test]
fn fresh_stack_is_identity_for_every_variant() {
    let f = fixture();
    for r in &f.corpus.records {
        let pr = &r.prompt;
        let prep = Prepared::new(&f.net, &r.z_t, &pr.e_g, &pr.e_k, &pr.hard_masks().unwrap(), f.sigma_b).unwrap();
        for v in Variant::ALL {
            let out = run_prepared(&f.net, &f.params, v, &prep, None).unwrap();
            assert!(out.z_out.max_abs_diff(&prep.parts.z_g) <= 1e-9, "{v}");
        }
    }
}

#[test]
fn forced_alpha_extremes() {
    let f = fixture();
    let mut p = f.params.clone();
    p.jitter(0.3, &mut rng(4));
    let r = &f.corpus.records[0];
    let pr = &r.prompt;
    let prep = Prepared::new(&f.net, &r.z_t, &pr.e_g, &pr.e_k, &pr.hard_masks().unwrap(), f.sigma_b).unwrap();
    let zero = run_prepared(&f.net, &p, Variant::V4, &prep, Some(0.0)).unwrap();
    assert!(zero.z_out.bitwise_eq(&zero.z_swin));
    let max = run_prepared(&f.net, &p, Variant::V4, &prep, Some(0.6)).unwrap();
    let gap = max.z_out.max_abs_diff(&max.z_film);
    let bound = max.z_swin.max_abs_diff(&max.z_film) * 0.4;
    assert!((gap - bound).abs() <= 1e-12 * (1.0 + bound));
}
