use hgs::data::events::{discretize, merge_bolus, CarbRate, EventStreams, InsulinRate, GRID_LEN};
use proptest::prelude::*;

fn grid(start: f64) -> Vec<(f64, f64)> {
    (0..GRID_LEN).map(|i| (start + 5.0 * i as f64, 100.0)).collect()
}

#[test]
fn hand_integrated_bins() {
    let streams = EventStreams {
        basal: vec![(2.5, 1.2)],
        bolus: vec![(1.0, 3.0)],
        carbs: vec![(4.0, 30.0)],
        heart_rate: vec![(0.0, 70.0), (2.0, 80.0), (5.0, 90.0), (6.0, 200.0)],
        steps: vec![(100.0, 12.0)],
        cgm: grid(0.0),
    };
    let d = discretize(&streams).unwrap();
    // bin [0,5]: basal 0.02 U/min for 2.5 min, the whole 3 U bolus over [1,3)
    assert!((d.series[[0, 1]] - (0.05 + 3.0) / 5.0).abs() < 1e-12);
    // bin [5,10]: basal only
    assert!((d.series[[1, 1]] - 0.02).abs() < 1e-12);
    // 30 g over [4, 4+2/3] at 45000 mg/min
    assert!((d.series[[0, 2]] - 30000.0 / 5.0).abs() < 1e-9);
    assert_eq!(d.series[[1, 2]], 0.0);
    assert_eq!(d.series[[0, 3]], 80.0);
    assert_eq!(d.series[[1, 3]], 145.0);
    // window [10,15] is empty: nearest sample carried, flagged
    assert_eq!(d.series[[2, 3]], 200.0);
    assert_eq!(d.series[[0, 4]], 12.0);
    // no bin has both heart-rate and step samples in its window
    assert_eq!(d.flagged.len(), GRID_LEN);
    assert_eq!(d.series[[19, 4]], 12.0);
    assert_eq!(d.series[[20, 4]], 12.0);
}

#[test]
fn merged_bolus_bins() {
    // 3 U at 0 runs to t=2; the 1.5 U at 1 merges into a 4.5 U dose over [0,3)
    let streams = EventStreams { bolus: vec![(0.0, 3.0), (1.0, 1.5), (9.0, 7.5)], cgm: grid(0.0), ..Default::default() };
    let d = discretize(&streams).unwrap();
    assert!((d.series[[0, 1]] - 4.5 / 5.0).abs() < 1e-12);
    // 7.5 U over [9,14): 1 min in bin 1, 4 min in bin 2
    assert!((d.series[[1, 1]] - 1.5 / 5.0).abs() < 1e-12);
    assert!((d.series[[2, 1]] - 6.0 / 5.0).abs() < 1e-12);
}

fn doses() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..200.0f64, 0.0..6.0f64), 0..12).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn merge_conserves_dose(d in doses()) {
        let m = merge_bolus(&d).unwrap();
        let before: f64 = d.iter().map(|x| x.1).sum();
        let after: f64 = m.iter().map(|x| x.1).sum();
        prop_assert!((before - after).abs() < 1e-9);
        for w in m.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 + w[0].1 / 1.5);
        }
        for x in &m {
            prop_assert!(d.iter().any(|y| y.0 == x.0));
        }
    }

    #[test]
    fn binned_insulin_and_carbs_conserve_totals(
        d in doses(),
        basal in prop::collection::vec((0.0..250.0f64, 0.0..3.0f64), 0..4),
        meals in prop::collection::vec((0.0..200.0f64, 1.0..100.0f64), 0..4),
    ) {
        let streams = EventStreams { basal: basal.clone(), bolus: d.clone(), carbs: meals.clone(), cgm: grid(0.0), ..Default::default() };
        let mut streams = streams;
        streams.normalize();
        let disc = discretize(&streams).unwrap();
        let horizon = 5.0 * GRID_LEN as f64;
        let rate = InsulinRate::new(&streams.basal, &merge_bolus(&streams.bolus).unwrap());
        let binned: f64 = disc.series.column(1).iter().sum::<f64>() * 5.0;
        prop_assert!((binned - rate.integral(0.0, horizon)).abs() < 1e-9);
        // every dose starts before t=200 and ends before the horizon
        let bolus_total: f64 = d.iter().map(|x| x.1).sum();
        let basal_only = InsulinRate::new(&streams.basal, &[]).integral(0.0, horizon);
        prop_assert!((binned - basal_only - bolus_total).abs() < 1e-9);
        let carbs: f64 = disc.series.column(2).iter().sum::<f64>() * 5.0;
        let expect: f64 = meals.iter().map(|m| m.1 * 1000.0).sum();
        prop_assert!((carbs - expect).abs() < 1e-9 * expect.max(1.0));
        prop_assert!((CarbRate::new(&streams.carbs).unwrap().integral(-1e3, 1e3) - expect).abs() < 1e-9 * expect.max(1.0));
    }
}
