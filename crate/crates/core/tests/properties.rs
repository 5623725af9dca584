use proptest::prelude::*;

use rtcnetlab::bridge::{Action, Episode, EpisodeConfig, Step, DEAD_BAND};
use rtcnetlab::feedback::{TwccRecorder, TWCC_DELTA_US};
use rtcnetlab::rate_control::clamp_rate;
use rtcnetlab::reliability::unwrap_near;
use rtcnetlab::scenario::{self, PRESETS};
use rtcnetlab::session::{self, RunOptions};
use rtcnetlab::SimTime;

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        4 => (1e5f64..2e7).prop_map(Action::bps),
        1 => Just(Action::Timeout),
        1 => Just(Action::Rate(serde_json::json!(null))),
        1 => Just(Action::Rate(serde_json::json!("high"))),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn applied_rates_respect_dead_band(actions in proptest::collection::vec(action(), 6)) {
        let cfg = EpisodeConfig {
            scenario: "easy".into(),
            seed: 1,
            duration_s: 6.0,
            decision_interval_s: 1.0,
        };
        let (mut ep, _) = Episode::reset(0, &cfg).unwrap();
        for a in actions {
            if let Step::End(_) = ep.step(a).unwrap() {
                break;
            }
        }
        for w in ep.applied_rates().windows(2) {
            prop_assert!((w[1] - w[0]).abs() / w[0] > DEAD_BAND);
            prop_assert_eq!(w[1], clamp_rate(w[1]));
        }
    }

    #[test]
    fn conservation_holds_for_short_runs(idx in 0usize..PRESETS.len(), seed in 0u64..1_000_000, dur in 2u32..12) {
        let sc = scenario::preset(PRESETS[idx]).unwrap();
        let opts = RunOptions { seed: Some(seed), duration_s: Some(dur as f64), ..RunOptions::default() };
        let r = session::run(&sc, &opts).unwrap();
        prop_assert!(r.summary.conservation.holds(), "{:?}", r.summary.conservation);
        prop_assert_eq!(r.summary.release_violations, 0);
        prop_assert_eq!(r.rows.len(), dur as usize);
    }
}

proptest! {
    #[test]
    fn twcc_reconstruction_error_is_bounded(gaps in proptest::collection::vec((0u64..50_000, any::<bool>()), 1..300)) {
        let mut rec = TwccRecorder::new();
        let mut t = 0;
        let mut sent = Vec::new();
        for (i, (gap, lost)) in gaps.iter().enumerate() {
            t += gap;
            if !lost {
                rec.on_packet(i as u64, SimTime(t));
            }
            sent.push((!lost).then_some(t));
        }
        if let Some(fb) = rec.build(SimTime(t)) {
            for (seq, got) in fb.arrivals() {
                match (sent[seq as usize], got) {
                    (Some(w), Some(g)) => prop_assert!(w.abs_diff(g.0) <= TWCC_DELTA_US / 2),
                    (None, None) => {}
                    other => prop_assert!(false, "seq {}: {:?}", seq, other),
                }
            }
        }
    }

    #[test]
    fn unwrap_near_inverts_truncation(ext in 40_000u64..1u64 << 40, off in -30_000i64..30_000) {
        let reference = (ext as i64 + off) as u64;
        prop_assert_eq!(unwrap_near(ext as u16, reference), ext);
    }
}

