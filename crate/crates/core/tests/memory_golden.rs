use tkit_core::memory_model::{logit_tensor_bytes, memory_report, MemConfig, MemoryReport};

fn report(cfg: MemConfig) -> MemoryReport {
    memory_report(&cfg).unwrap()
}

// Values frozen from the documented closed forms.
#[test]
fn golden_reports() {
    let full = MemConfig::default();
    assert_eq!(
        report(full),
        MemoryReport {
            encoder: 16_726_400,
            predictor: 2_676_736,
            joint: 54_900_736,
            logit_tensor: 404_000_000,
            gradients: 12_177_024,
            total: 490_480_896,
        }
    );

    let sampled = MemConfig {
        sampled_size: Some(200),
        ..full
    };
    assert_eq!(report(sampled).logit_tensor, 40_400_000);
    assert_eq!(report(sampled).total, 126_880_896);

    let small = MemConfig {
        frames: 50,
        target_len: 10,
        vocab_size: 200,
        sampled_size: Some(50),
        batch: 8,
        hidden: 48,
        input_dim: 24,
        element_bytes: 8,
        self_condition: true,
        count_logit_grad: true,
    };
    assert_eq!(
        report(small),
        MemoryReport {
            encoder: 2_756_480,
            predictor: 147_840,
            joint: 1_991_040,
            logit_tensor: 3_520_000,
            gradients: 526_976,
            total: 8_942_336,
        }
    );
}

#[test]
fn logit_tensor_dominates_at_large_vocab_and_shrinks_with_sampling() {
    let full = MemConfig::default();
    let r = report(full);
    assert!(r.logit_tensor > r.encoder_and_predictor());
    let s = MemConfig {
        sampled_size: Some(100),
        ..full
    };
    assert!(report(s).logit_tensor < r.logit_tensor / 10);
    assert_eq!(logit_tensor_bytes(&full) / logit_tensor_bytes(&s), 20);
}

mod monotone {
    use proptest::prelude::*;
    use tkit_core::memory_model::{memory_report, MemConfig};

    fn config() -> impl Strategy<Value = MemConfig> {
        (1u64..200, 0u64..50, 2u64..500, 1u64..8, any::<bool>(), any::<bool>()).prop_flat_map(
            |(frames, target_len, vocab_size, batch, sc, grad)| {
                (1..=vocab_size).prop_map(move |s| MemConfig {
                    frames,
                    target_len,
                    vocab_size,
                    sampled_size: Some(s),
                    batch,
                    hidden: 16,
                    input_dim: 8,
                    element_bytes: 4,
                    self_condition: sc,
                    count_logit_grad: grad,
                })
            },
        )
    }

    fn logit_and_total(cfg: &MemConfig) -> (u64, u64) {
        let r = memory_report(cfg).unwrap();
        (r.logit_tensor, r.total)
    }

    proptest! {
        #[test]
        fn grows_with_every_axis(cfg in config()) {
            let base = logit_and_total(&cfg);
            let bigger = [
                MemConfig { frames: cfg.frames + 1, ..cfg },
                MemConfig { target_len: cfg.target_len + 1, ..cfg },
                MemConfig { batch: cfg.batch + 1, ..cfg },
                MemConfig { vocab_size: cfg.vocab_size + 1, sampled_size: cfg.sampled_size.map(|s| s + 1), ..cfg },
            ];
            for b in &bigger {
                let (logit, total) = logit_and_total(b);
                prop_assert!(logit > base.0 && total > base.1);
            }
            if cfg.sampled_size != Some(cfg.vocab_size) {
                let wider = MemConfig { sampled_size: cfg.sampled_size.map(|s| s + 1), ..cfg };
                let (logit, total) = logit_and_total(&wider);
                prop_assert!(logit > base.0 && total > base.1);
            }
        }

        #[test]
        fn sampling_never_costs_more(cfg in config()) {
            let full = MemConfig { sampled_size: None, ..cfg };
            let (sl, st) = logit_and_total(&cfg);
            let (fl, ft) = logit_and_total(&full);
            prop_assert!(sl <= fl && st <= ft);
            prop_assert_eq!(fl * cfg.sampled_size.unwrap(), sl * cfg.vocab_size);
        }
    }
}
