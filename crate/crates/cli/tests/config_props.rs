use proptest::prelude::*;
use vidmae_cli::config::{parse_entries, RunConfig};

fn strategy_name() -> impl Strategy<Value = &'static str> {
    prop::sample::select(vec!["random", "tube", "frame", "surgmae", "surgmae_static"])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn render_then_parse_is_identity(
        seed in any::<u64>(),
        strategy in strategy_name(),
        ratio in 0.5f64..0.95,
        lr in 1e-5f64..1e-2,
        steps in 1usize..500,
        clip in prop::option::of(0.001f64..10.0),
        normalize in any::<bool>(),
    ) {
        let mut cfg = RunConfig::default();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("strategy", strategy).unwrap();
        cfg.set("ratio", &ratio.to_string()).unwrap();
        cfg.set("lr", &lr.to_string()).unwrap();
        cfg.set("steps", &steps.to_string()).unwrap();
        cfg.set("warmup_steps", &(steps / 10).to_string()).unwrap();
        cfg.set("grad_clip", &clip.map_or("none".to_string(), |c| c.to_string())).unwrap();
        cfg.set("normalize", &normalize.to_string()).unwrap();
        let back = RunConfig::resolve(&[parse_entries(&cfg.render()).unwrap()]).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn later_layers_win(a in 1usize..100, b in 1usize..100) {
        let layer = |v: usize| vec![("steps".to_string(), v.to_string()), ("warmup_steps".to_string(), "0".to_string())];
        let cfg = RunConfig::resolve(&[layer(a), layer(b)]).unwrap();
        prop_assert_eq!(cfg.pipeline.pretrain.steps, b);
    }
}
