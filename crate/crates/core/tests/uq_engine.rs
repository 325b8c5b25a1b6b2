use std::sync::OnceLock;

use uqcat_core::augment::{AffineParams, TransformSample};
use uqcat_core::phantom::{generate_cohort, Phantom, PhantomSpec};
use uqcat_core::predictor::{train, Predictor, PredictorConfig, SliceNet, TrainConfig};
use uqcat_core::uq::{run_augment_passes, run_case, run_dropout_passes, uncertainty_maps, CaseSpec, RunOptions};
use uqcat_core::volume::Volume;

struct Fixture {
    net: SliceNet,
    test: Vec<Phantom>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = PhantomSpec {
            seed: 40,
            ..PhantomSpec::default()
        };
        let cohort = generate_cohort(&spec, 4).unwrap();
        let test = generate_cohort(&PhantomSpec { seed: 90, ..spec }, 1).unwrap();
        let mut net = SliceNet::new(PredictorConfig::default(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            ..TrainConfig::default()
        };
        train(&mut net, &cohort, &[], &cfg).unwrap();
        Fixture { net, test }
    })
}

fn mad(a: &Volume, b: &Volume) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f64::from((x - y).abs()))
        .sum::<f64>()
        / a.len() as f64
}

#[test]
fn heavy_dropout_disrupts_more_than_light() {
    let f = fixture();
    let image = &f.test[0].image;
    let base = f.net.predict(image, 0.0, 0).unwrap();
    let avg = |rate: f32| {
        (0..50)
            .map(|s| mad(&f.net.predict(image, rate, s).unwrap(), &base))
            .sum::<f64>()
            / 50.0
    };
    let (light, heavy) = (avg(0.03), avg(0.40));
    assert!(heavy > light, "rate 0.40 {heavy} vs rate 0.03 {light}");
}

#[test]
fn seed_contract() {
    let f = fixture();
    let image = &f.test[0].image;
    assert_eq!(
        f.net.predict(image, 0.0, 1).unwrap(),
        f.net.predict(image, 0.0, 2).unwrap()
    );
    let a = f.net.predict(image, 0.03, 7).unwrap();
    assert_eq!(a, f.net.predict(image, 0.03, 7).unwrap());
    let differs = (8..16).any(|s| f.net.predict(image, 0.03, s).unwrap() != a);
    assert!(differs);
}

#[test]
fn rate_zero_control_gives_identical_samples() {
    let f = fixture();
    let opts = RunOptions {
        samples: 50,
        seed: 3,
        binarize: false,
    };
    let run = run_dropout_passes(&f.net, &f.test[0].image, 0.0, 1, 0, &opts).unwrap();
    let first = &run.stack.samples()[0];
    assert!(run.stack.samples().iter().all(|s| s == first));
    let maps = uncertainty_maps(&run.stack).unwrap();
    assert!(maps.variance.data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_augmentation_reproduces_deterministic_prediction() {
    let f = fixture();
    let image = &f.test[0].image;
    let identity = TransformSample {
        affine: Some(AffineParams::identity()),
        ghosting: None,
        bias: None,
    };
    let run = run_augment_passes(&f.net, image, &vec![identity; 5], 7, 0, false).unwrap();
    let det = f.net.predict(image, 0.0, 0).unwrap();
    assert!(run.stack.samples().iter().all(|s| *s == det));
}

#[test]
fn stacks_are_reproducible_and_scheduling_independent() {
    let f = fixture();
    let image = &f.test[0].image;
    let opts = RunOptions {
        samples: 12,
        seed: 11,
        binarize: false,
    };
    for id in [2u8, 9, 14] {
        let case = CaseSpec::from_id(id).unwrap();
        let pool = |n: usize| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        let one = pool(1).install(|| run_case(&f.net, image, &case, 0, &opts).unwrap());
        let four = pool(4).install(|| run_case(&f.net, image, &case, 0, &opts).unwrap());
        let again = run_case(&f.net, image, &case, 0, &opts).unwrap();
        assert_eq!(one.stack, four.stack, "case {id}");
        assert_eq!(one.stack, again.stack, "case {id}");
        assert_eq!(one.passes, four.passes);
    }
}
