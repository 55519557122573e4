//! Ideal-reader checks on the synthetic corpus: the loud block is capped
//! by its noise floor, the faint block is perfectly predictive but flips
//! under perturbations smaller than the evaluation budget. These bands
//! gate the dataset defaults that every downstream experiment relies on.

mod common;

use rfl_core::data::{
    generate, nrf_flip_radius, rf_flip_radius, Dataset, SyntheticSpec, HEIGHT, NRF_ROWS, RF_ROWS,
    WIDTH,
};

/// Nearest clean-template classifier restricted to a row band.
fn template_accuracy(ds: &Dataset, spec: &SyntheticSpec, rows: std::ops::Range<usize>) -> f64 {
    let templates: Vec<_> = (0..spec.classes)
        .map(|c| rfl_core::data::class_signal(spec, c))
        .collect();
    let mut correct = 0usize;
    for i in 0..ds.len() {
        let img = ds.images.sample(i);
        let mut best = (f64::INFINITY, 0usize);
        for (c, t) in templates.iter().enumerate() {
            let mut d = 0.0;
            for p in 0..HEIGHT * WIDTH {
                if rows.contains(&(p / WIDTH)) {
                    d += (img[p] - t.data()[p]).powi(2);
                }
            }
            if d < best.0 {
                best = (d, c);
            }
        }
        if best.1 == ds.labels[i] {
            correct += 1;
        }
    }
    correct as f64 / ds.len() as f64
}

#[test]
fn loud_rows_alone_are_capped_well_below_perfect() {
    let spec = SyntheticSpec {
        n_per_class: 256,
        test_per_class: 256,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).unwrap();
    let acc = template_accuracy(&data.test, &spec, RF_ROWS);
    assert!(
        (0.70..=0.95).contains(&acc),
        "loud-row reader at {acc}; the noise floor is mistuned"
    );
}

#[test]
fn faint_rows_alone_are_perfectly_predictive() {
    let spec = SyntheticSpec {
        n_per_class: 64,
        test_per_class: 128,
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).unwrap();
    let acc = template_accuracy(&data.test, &spec, NRF_ROWS);
    assert_eq!(acc, 1.0, "the faint code must be noise free by default");
}

#[test]
fn flip_radii_straddle_the_attack_budgets() {
    // Evaluation budget 0.25 and hardening budget 0.35 must separate the
    // two families: the faint code flips inside both with margin, the
    // loud template flips outside both with margin.
    let spec = SyntheticSpec::default();
    let faint = nrf_flip_radius(&spec);
    let loud = rf_flip_radius(&spec);
    assert!(
        faint < 0.25 * 0.75,
        "faint flip {faint} too close to the eval budget"
    );
    assert!(
        loud > 0.35 * 1.25,
        "loud flip {loud} too close to the hardening budget"
    );
}

#[test]
fn perturbation_at_the_faint_flip_radius_defeats_the_faint_reader() {
    // Move each clean image straight toward a rival class in the faint
    // rows, spending just over the flip radius; the faint reader must now
    // prefer the rival while the loud reader holds.
    let spec = SyntheticSpec::default();
    let radius = nrf_flip_radius(&spec);
    for class in 0..spec.classes {
        let rival = (class + 1) % spec.classes;
        let own = rfl_core::data::class_signal(&spec, class);
        let other = rfl_core::data::class_signal(&spec, rival);
        // Unit direction toward the rival, restricted to the faint rows.
        let mut dir = vec![0.0; HEIGHT * WIDTH];
        let mut norm = 0.0f64;
        for p in 0..HEIGHT * WIDTH {
            if NRF_ROWS.contains(&(p / WIDTH)) {
                dir[p] = other.data()[p] - own.data()[p];
                norm += dir[p] * dir[p];
            }
        }
        let norm = norm.sqrt();
        let step = radius * 1.01;
        let moved: Vec<f64> = (0..HEIGHT * WIDTH)
            .map(|p| own.data()[p] + step * dir[p] / norm)
            .collect();

        let dist = |t: &rfl_core::tensor::Buffer, rows: &std::ops::Range<usize>| -> f64 {
            (0..HEIGHT * WIDTH)
                .filter(|p| rows.contains(&(p / WIDTH)))
                .map(|p| (moved[p] - t.data()[p]).powi(2))
                .sum()
        };
        assert!(
            dist(&other, &NRF_ROWS) < dist(&own, &NRF_ROWS),
            "class {class}: faint reader survived a supra-radius push"
        );
        assert!(
            dist(&own, &RF_ROWS) < dist(&other, &RF_ROWS),
            "class {class}: loud reader should be untouched"
        );
    }
}
