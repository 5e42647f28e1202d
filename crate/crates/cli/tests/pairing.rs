use flexcmh::data::SyntheticSpec;
use flexcmh::trainer::TrainConfig;
use flexcmh_cli::pipeline::{mean_map, run_experiment};
use flexcmh_cli::{DataSource, ExperimentConfig, Setting};

fn config(seed: u64) -> ExperimentConfig {
    let spec = SyntheticSpec {
        pair_fraction: 1.0,
        ..SyntheticSpec::planted(5, 100, 20, 8.0, seed)
    };
    let mut cfg = ExperimentConfig::new(DataSource::Synthetic(spec), TrainConfig::new(5, 16));
    cfg.set_seed(seed);
    cfg
}

#[test]
fn aligned_pairs_beat_shuffled_pairs() {
    let (mut aligned, mut shuffled) = (0.0, 0.0);
    for seed in 0..10 {
        let cfg = config(seed);
        aligned += mean_map(&run_experiment(&cfg).unwrap().1, "none");

        let mut wrong = config(seed);
        wrong.setting = Setting::WeakShuffled;
        wrong.keep_fraction = 0.0;
        wrong.trust_shuffled = true;
        shuffled += mean_map(&run_experiment(&wrong).unwrap().1, "none");
    }
    assert!(aligned > shuffled, "aligned {} vs shuffled {}", aligned / 10.0, shuffled / 10.0);
}
