//! Trains model variants on the synthetic benchmark and prints test mAP.
//!
//! cargo run --release -p chg-core --example ablation -- seeds=0,1,2 variants=full,baseline

use std::time::Instant;

use chg_core::eval::{evaluate_map, evaluate_model, scene_ground_truth, scene_predictions, EvalOptions};
use chg_core::graph::infer;
use rand::SeedableRng;
use chg_core::graph::{Flags, HomogeneousMode};
use chg_core::synth::{generate_scene, generate_synthetic_scenes, GeneratorSpec};
use chg_core::train::{train, TrainConfig};

fn flags(name: &str) -> Flags {
    let full = Flags::default();
    match name {
        "full" => full,
        "baseline" => Flags::baseline(),
        "no-inter" => Flags { use_inter: false, ..full },
        "no-intra" => Flags { use_intra: false, ..full },
        "no-w" => Flags { use_interactiveness_weight: false, ..full },
        "no-intra-att" => Flags { use_intra_attention: false, ..full },
        "inter-no-w" => Flags { use_intra: false, use_interactiveness_weight: false, ..full },
        "no-att" => Flags { use_intra_attention: false, use_interactiveness_weight: false, ..full },
        "homo-intra" => Flags { homogeneous: HomogeneousMode::Intra, ..full },
        "homo-inter" => Flags { homogeneous: HomogeneousMode::Inter, ..full },
        other => panic!("unknown variant {other}"),
    }
}

fn main() {
    let mut cfg = TrainConfig::default();
    let mut gen = GeneratorSpec::default();
    let mut seeds = vec![0u64];
    let mut variants = vec!["full".to_string()];
    let (mut n_train, mut n_test) = (500, 200);
    let mut verbose = false;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        let list = || v.split(',').map(str::to_string).collect::<Vec<_>>();
        match k {
            "seeds" => seeds = list().iter().map(|s| s.parse().unwrap()).collect(),
            "variants" => variants = list(),
            "verbose" => verbose = v == "1",
            "train" => n_train = v.parse().unwrap(),
            "test" => n_test = v.parse().unwrap(),
            "epochs" => cfg.epochs = v.parse().unwrap(),
            "d" => cfg.model.d = v.parse().unwrap(),
            "lr" => cfg.lr0 = v.parse().unwrap(),
            "momentum" => cfg.momentum = v.parse().unwrap(),
            "batch" => cfg.batch_size = v.parse().unwrap(),
            "channels" => {
                let c: Vec<usize> = list().iter().map(|s| s.parse().unwrap()).collect();
                cfg.model.spatial.channels = [c[0], c[1], c[2]];
            }
            "mean" => cfg.model.intra_mean_divide = v.parse().unwrap(),
            "sigma" => gen.sigma = v.parse().unwrap(),
            "occlusion" => gen.occlusion = v.parse().unwrap(),
            "simple" => gen.simple_fraction = v.parse().unwrap(),
            "bystander" => gen.bystander = v.parse().unwrap(),
            "codescale" => gen.code_scale = v.parse().unwrap(),
            "shared" => gen.shared_target = v.parse().unwrap(),
            "teams" => gen.teams = v.parse().unwrap(),
            "inrel" => gen.in_relation = v.parse().unwrap(),
            "crowd" => gen.crowd_fraction = v.parse().unwrap(),
            other => panic!("unknown key {other}"),
        }
    }
    for variant in &variants {
        let mut hidden_maps = Vec::new();
        let mut maps = Vec::new();
        for &seed in &seeds {
            let train_set = generate_synthetic_scenes(n_train, 1000 + seed, &gen).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2000 + seed);
            let (test_set, latents): (Vec<_>, Vec<_>) =
                (0..n_test).map(|k| generate_scene(format!("t{k}"), &gen, &mut rng).unwrap()).unzip();
            let mut c = cfg.clone();
            c.seed = seed;
            c.model.flags = flags(variant);
            let start = Instant::now();
            let out = train(&train_set, &c).unwrap();
            let secs = start.elapsed().as_secs_f64();
            if verbose {
                let losses: Vec<String> = out.history.iter().map(|h| format!("{:.3}", h.loss)).collect();
                println!("  {}", losses.join(" "));
            }
            let r = evaluate_model(&out.params, &c.model, &test_set, &EvalOptions::default()).unwrap();
            let (mut hp, mut hg) = (Vec::new(), Vec::new());
            for (scene, lat) in test_set.iter().zip(&latents) {
                let y = infer(&out.params, &c.model, &scene.input).unwrap();
                let hidden = |h: &chg_core::geometry::BoundingBox| {
                    scene.input.subjects.iter().zip(&lat.occluded).any(|(s, &o)| o && s.bbox == *h)
                };
                hp.extend(scene_predictions(&scene.id, &scene.input, &y).unwrap().into_iter().filter(|p| hidden(&p.human)));
                hg.extend(scene_ground_truth(scene).into_iter().filter(|g| hidden(&g.human)));
            }
            let hidden_map = evaluate_map(&hp, &hg, 0.5).map_or(f64::NAN, |r| r.map);
            for holders in [false, true] {
                let (mut hp, mut hg) = (Vec::new(), Vec::new());
                for (scene, lat) in test_set.iter().zip(&latents) {
                    let is_holder = lat.kinds.iter().any(|k| matches!(k, chg_core::synth::ObjectKind::Cue(_)));
                    if is_holder != holders {
                        continue;
                    }
                    let y = infer(&out.params, &c.model, &scene.input).unwrap();
                    let hidden = |h: &chg_core::geometry::BoundingBox| {
                        scene.input.subjects.iter().zip(&lat.occluded).any(|(s, &o)| o && s.bbox == *h)
                    };
                    hp.extend(scene_predictions(&scene.id, &scene.input, &y).unwrap().into_iter().filter(|p| hidden(&p.human)));
                    hg.extend(scene_ground_truth(scene).into_iter().filter(|g| hidden(&g.human)));
                }
                let m = evaluate_map(&hp, &hg, 0.5).map_or(f64::NAN, |r| r.map);
                println!("  hidden {} {m:.4} ({} gt)", if holders { "holder" } else { "crowd" }, hg.len());
            }
            let train_map = evaluate_model(&out.params, &c.model, &train_set, &EvalOptions::default()).unwrap().map;
            println!("  train mAP {train_map:.4}");
            let first = out.history.first().unwrap().loss;
            let last = out.history.last().unwrap().loss;
            let sub = |s: &Option<Box<chg_core::eval::EvalReport>>| s.as_ref().map_or(f64::NAN, |r| r.map);
            println!(
                "{variant:>12} seed {seed}: mAP {:.4} complex {:.4} simple {:.4} hidden {hidden_map:.4} loss {first:.4} -> {last:.4} ({secs:.1}s)",
                r.map,
                sub(&r.complex),
                sub(&r.simple)
            );
            hidden_maps.push(hidden_map);
            maps.push((r.map, sub(&r.complex), sub(&r.simple)));
        }
        let k = maps.len() as f64;
        let mean = |f: fn(&(f64, f64, f64)) -> f64| maps.iter().map(f).sum::<f64>() / k;
        println!(
            "{variant:>12} mean: mAP {:.4} complex {:.4} simple {:.4} hidden {:.4}",
            mean(|m| m.0),
            mean(|m| m.1),
            mean(|m| m.2),
            hidden_maps.iter().sum::<f64>() / k
        );
    }
}
