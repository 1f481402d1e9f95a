use oprenew_lab::config::{ExperimentConfig, FiberKind, MapConfig, MapKindConfig};
use proptest::prelude::*;

fn configs() -> impl Strategy<Value = ExperimentConfig> {
    (
        0u64..=i64::MAX as u64,
        1usize..16,
        0.1f64..10.0,
        prop::sample::subsequence((1u8..=12).collect::<Vec<_>>(), 0..=12),
        prop_oneof![Just(MapKindConfig::Lsv), Just(MapKindConfig::NonMarkov)],
        0.2f64..3.0,
        prop_oneof![Just(FiberKind::Stacked), Just(FiberKind::Sheared)],
        -0.9f64..0.9,
        (20_000usize..200_000, 8usize..4096, 1e-6f64..1e-4),
    )
        .prop_map(|(seed, threads, slack, criteria, kind, alpha, fiber, shear, (n_max, m, u_lo))| {
            let mut c = ExperimentConfig {
                seed,
                threads,
                gate_slack: slack,
                criteria,
                map: MapConfig { kind, alpha, fiber, shear, ..MapConfig::default() },
                ..ExperimentConfig::default()
            };
            c.tails.n_max = n_max;
            c.tails.fit_hi = n_max.min(10_000);
            c.tails.fit_lo = c.tails.fit_hi / 100;
            c.spectrum.m = m;
            c.spectrum.u_lo = u_lo;
            c.renewal.rates_n = n_max.min(10_000);
            c.renewal.n = n_max.min(2000);
            c.norms.slice_hi = n_max.min(10_000);
            c
        })
}

proptest! {
    #[test]
    fn canonical_text_round_trips(cfg in configs()) {
        prop_assert!(cfg.validate().is_ok(), "{:?}", cfg.validate());
        let text = cfg.to_canonical().unwrap();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_canonical().unwrap(), text);
    }
}

#[test]
fn empty_file_is_the_default() {
    assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
}

#[test]
fn validation_rejects_bad_values() {
    for text in [
        "threads = 0",
        "gate_slack = 0.0",
        "criteria = [13]",
        "seed = -1",
        "[map]\nalpha = -1.0",
        "[map]\nkind = \"custom\"",
        "[map]\nfiber = \"sheared\"\nshear = 1.5",
        "[tails]\nfit_lo = 1000\nfit_hi = 2000",
        "[spectrum]\nu_lo = 0.1\nu_hi = 0.01",
        "[mix]\nlag_lo = 800\nlag_hi = 50",
        "[norms]\nlevels = 40",
        "[norms]\nmy = 10",
        "[unknown]\nx = 1",
    ] {
        assert!(ExperimentConfig::parse(text).is_err(), "accepted: {text}");
    }
}
