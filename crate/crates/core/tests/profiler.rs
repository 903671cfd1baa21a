mod common;

use salt_core::model::{build_model, Ablation, ModelConfig, Variant};
use salt_core::profiler::*;
use salt_core::{DType, Error, Tensor};

fn salt(n: usize) -> ModelConfig {
    ModelConfig::new(Variant::Salt, n)
}

fn with(cfg: ModelConfig, f: impl FnOnce(&mut ModelConfig)) -> ModelConfig {
    let mut c = cfg;
    f(&mut c);
    c
}

fn references() -> Vec<(ModelConfig, u64)> {
    let mut refs = vec![
        (salt(150), 739_918),
        (ModelConfig::new(Variant::Linformer, 150), 552_718),
        (ModelConfig::new(Variant::Transformer, 150), 2_479_918),
        (with(salt(150), |c| c.ablation.no_partition = true), 739_918),
        (with(salt(150), |c| c.ablation.no_conv = true), 552_718),
        (salt(16), 79_566),
        (salt(32), 158_414),
        (ModelConfig::new(Variant::Linformer, 16), 59_598),
        (ModelConfig::new(Variant::Linformer, 32), 118_478),
        (ModelConfig::new(Variant::Transformer, 16), 76_494),
        (ModelConfig::new(Variant::Transformer, 32), 197_326),
    ];
    for (p, f) in [(1, 527_518), (2, 576_718), (4, 739_918), (8, 1_325_518), (16, 3_533_518)] {
        refs.push((with(salt(150), |c| c.proj = p), f));
    }
    let sweep: [(&[usize], u64); 9] = [
        (&[1, 3, 5], 739_918),
        (&[1, 5, 7], 816_718),
        (&[1, 3, 5, 7], 879_118),
        (&[1, 3, 5, 7, 9], 1_056_718),
        (&[3, 3, 3], 739_918),
        (&[5, 5, 5], 855_118),
        (&[7, 7, 7], 970_318),
        (&[3, 5, 7], 855_118),
        (&[3, 5, 7, 9], 1_032_718),
    ];
    for (filters, f) in sweep {
        refs.push((with(salt(150), |c| c.filters = filters.to_vec()), f));
    }
    refs
}

#[test]
fn every_published_flop_count_is_met() {
    for (cfg, expected) in references() {
        assert_eq!(flops_estimate(&cfg).unwrap(), expected, "{cfg:?}");
    }
    assert_eq!(with_commas(flops_estimate(&salt(150)).unwrap()), "739,918");
}

/// The published counts admit exactly one other convention in the search
/// grid. It moves per-element costs between bias, activation, scaling and
/// softmax terms that always appear with equal extents, so it agrees with
/// the frozen one on every multi-class configuration.
#[test]
fn calibration_finds_the_frozen_convention_and_its_relabelling() {
    let found = calibrate(&references()).unwrap();
    let twin = FlopConvention { bias: 0, softmax: 6, scale: 0, dyt: 4, relu: 1, maxpool: 1, ..CALIBRATED };
    assert_eq!(found, vec![twin, CALIBRATED]);
    for v in [Variant::Salt, Variant::Linformer, Variant::Transformer] {
        for n in [8, 16, 33, 150] {
            for layers in [1, 2] {
                for classes in [2, 5, 10] {
                    let cfg = ModelConfig { layers, classes, ..ModelConfig::new(v, n) };
                    assert_eq!(flops_with(&cfg, &twin).unwrap(), flops_with(&cfg, &CALIBRATED).unwrap());
                }
            }
        }
    }
}

#[test]
fn ablations_share_flops_with_their_twins() {
    for n in [16, 32, 64, 150] {
        for p in [1, 2, 4, 8] {
            let base = ModelConfig { proj: p, ..salt(n) };
            let no_part = with(base.clone(), |c| c.ablation.no_partition = true);
            assert_eq!(flops_estimate(&base).unwrap(), flops_estimate(&no_part).unwrap());
            let no_conv = with(base.clone(), |c| c.ablation = Ablation { no_conv: true, ..Ablation::default() });
            let lin = ModelConfig { variant: Variant::Linformer, ..ModelConfig { proj: p, ..salt(n) } };
            assert_eq!(flops_estimate(&no_conv).unwrap(), flops_estimate(&lin).unwrap());
        }
    }
}

#[test]
fn salt_flops_are_linear_in_filters_and_length() {
    let by_f: Vec<i64> = (1..=6)
        .map(|f| flops_estimate(&with(salt(150), |c| c.filters = vec![3; f])).unwrap() as i64)
        .collect();
    assert!(by_f.windows(3).all(|w| w[2] - w[1] == w[1] - w[0]));
    let by_n: Vec<i64> = (8..=160).map(|n| flops_estimate(&salt(n)).unwrap() as i64).collect();
    assert!(by_n.windows(3).all(|w| w[2] - w[1] == w[1] - w[0]));
    assert!(by_n.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn scaling_curves_are_linear_and_quadratic() {
    let ns = [16, 32, 64, 128, 150];
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let table = |v| flops_scaling_table(&ModelConfig::new(v, 16), &ns).unwrap();
    let salt_t = table(Variant::Salt);
    assert_eq!(salt_t[0], (16, 79_566));
    assert_eq!(salt_t[1], (32, 158_414));
    assert_eq!(salt_t[4], (150, 739_918));
    let ys: Vec<f64> = salt_t.iter().map(|&(_, f)| f as f64).collect();
    let (salt_rss, r2) = common::poly_fit(&xs, &ys, 1);
    assert!(r2 > 0.999, "{r2}");

    let tr = table(Variant::Transformer);
    assert_eq!(tr[0], (16, 76_494));
    assert_eq!(tr[1], (32, 197_326));
    let ty: Vec<f64> = tr.iter().map(|&(_, f)| f as f64).collect();
    let (lin_rss, _) = common::poly_fit(&xs, &ty, 1);
    let (quad_rss, _) = common::poly_fit(&xs, &ty, 2);
    assert!(quad_rss < lin_rss * 1e-6, "{quad_rss} vs {lin_rss}");
    assert!(lin_rss > 100.0 * salt_rss.max(1.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scaling.csv");
    write_scaling_csv(&path, "salt", &salt_t).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().collect::<Vec<_>>()[..2], ["variant,n,flops", "salt,16,79566"]);
}

#[test]
fn attention_buffer_ratio() {
    let t = attention_buffer_elements(&ModelConfig::new(Variant::Transformer, 150));
    let s = attention_buffer_elements(&salt(150));
    assert_eq!(t as f64 / s as f64, 37.5);
}

#[test]
fn activation_memory_matches_hand_walk() {
    // SAL-T n=16, d=16, H=4, p=4: the widest point is right after the
    // value projection, where the embedding (256), Q, K and V (256 each)
    // are live together: 1024 elements.
    assert_eq!(activation_memory(&salt(16), 1).unwrap(), 1024 * 8);
    // Transformer n=16: at the scaling step V (256), raw logits (1024) and
    // scaled logits (1024) are live: 2304 elements.
    assert_eq!(activation_memory(&ModelConfig::new(Variant::Transformer, 16), 1).unwrap(), 2304 * 8);
    let f32_cfg = ModelConfig { dtype: DType::F32, ..salt(16) };
    assert_eq!(activation_memory(&f32_cfg, 1).unwrap(), 1024 * 4);
    for cfg in [salt(150), ModelConfig::new(Variant::Transformer, 150)] {
        let one = activation_memory(&cfg, 64).unwrap();
        assert_eq!(activation_memory(&cfg, 128).unwrap(), 2 * one);
    }
}

#[test]
fn cost_report_is_pure() {
    let cfg = salt(150);
    let a = cost_report(&cfg, 256).unwrap();
    assert_eq!(a, cost_report(&cfg.clone(), 256).unwrap());
    assert_eq!((a.flops, a.params), (739_918, 3356));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cost.csv");
    write_cost_csv(&path, &[("salt".into(), a.clone())]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "name,variant,n,p,filters,layers,classes,flops,params,activation_bytes,batch");
    assert_eq!(lines[1], format!("salt,salt,150,4,1;3;5,1,5,739918,3356,{},256", a.activation_bytes));
}

#[test]
fn latency_contracts_and_stability() {
    let model = build_model(&salt(16)).unwrap();
    let batch: Tensor<f32> = Tensor::zeros(vec![8, 16, 3]);
    assert!(matches!(latency_bench(&model, &batch, 0, 5), Err(Error::Contract(_))));
    assert!(matches!(latency_bench(&model, &batch, 30, 0), Err(Error::Contract(_))));
    let a = latency_bench(&model, &batch, 40, 5).unwrap();
    let b = latency_bench(&model, &batch, 40, 5).unwrap();
    assert_eq!((a.reps, a.batch, a.warmup, a.dtype), (40, 8, 5, DType::F32));
    assert!(a.std_us >= 0.0 && a.mean_us > 0.0);
    let combined = (a.std_us.powi(2) + b.std_us.powi(2)).sqrt();
    assert!((a.mean_us - b.mean_us).abs() <= 3.0 * combined, "{a:?} {b:?}");
}
