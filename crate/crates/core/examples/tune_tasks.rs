//! Scratch exploration for acceptance tuning (deleted before shipping).
use tinytrain_core::data::prototype_task;
use tinytrain_core::sparse::{SelectPolicy, UpdateScheme};
use tinytrain_core::train::{
    compile_model, evaluate, pretrain_and_quantize, train, OptimizerConfig, PretrainConfig,
    TrainState,
};

fn arm(bundle: &tinytrain_core::graph::ModelBundle, scheme: &UpdateScheme,
       tr: &tinytrain_core::data::Dataset, ev: &tinytrain_core::data::Dataset,
       lr: f64, epochs: usize, seed: u64, qas: bool) -> (f64, f64, f64) {
    let o = OptimizerConfig { lr, epochs, qas_enabled: qas, grad_clip: Some(0.5), ..Default::default() };
    let compiled = compile_model(bundle, scheme, SelectPolicy::Magnitude, seed).unwrap();
    let mut st = TrainState::new(compiled, o, seed).unwrap();
    match train(&mut st, tr, Some(ev), "x") {
        Ok(recs) => (recs.last().unwrap().loss,
                     evaluate(&st, ev).unwrap() * 100.0,
                     evaluate(&st, tr).unwrap() * 100.0),
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.001);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let samples: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(200);
    let blocks: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
    let noise: f32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let cfg = tinytrain_core::graph::BackboneConfig::toy(blocks, 8, 10, 8);
    println!("lr={lr} epochs={epochs} samples={samples} blocks={blocks} noise={noise}");

    for seed in 0..5u64 {
        let pretext = prototype_task(10, samples, 3, 8, noise, 7000 + seed).unwrap();
        let pre = pretrain_and_quantize(&cfg, 10 + seed, &pretext, &PretrainConfig::default()).unwrap();
        let down = prototype_task(10, samples, 3, 8, noise, 100 + seed).unwrap();
        let (tr, ev) = down.split(0.3, seed);
        let layers = pre.quantized.graph.layers.len();
        let scheme = UpdateScheme::full_update(layers);

        let (l_qas, a_qas, t_qas) = arm(&pre.quantized, &scheme, &tr, &ev, lr, epochs, seed, true);
        let (l_raw, a_raw, _) = arm(&pre.quantized, &scheme, &tr, &ev, lr, epochs, seed, false);
        let (l_sh, a_sh, t_sh) = arm(&pre.float, &scheme, &tr, &ev, lr, epochs, seed, true);
        println!("seed {seed}: pretext {:.2} | qas loss {l_qas:.3} acc {a_qas:.1} (train {t_qas:.1}) | noqas loss {l_raw:.3} acc {a_raw:.1} | shadow loss {l_sh:.3} acc {a_sh:.1} (train {t_sh:.1})",
                 pre.pretext_accuracy);
    }
}
