// Temporary bring-up harness: trains the toy model on a default corpus and
// prints controlled vs spontaneous metrics.

use std::time::Instant;

use cadence_core::cond::{CondConfig, TextCond};
use cadence_core::flow::{GenConfig, GeneratorNet, Trainer, TrainerConfig};
use cadence_core::frame::frames_to_ms;
use cadence_core::pipeline::{evaluate, train_loop, CondFormat, EvalOptions, Mode};
use cadence_core::rng::stream;
use cadence_core::world::{LoadedUtt, Split, TokenSignatures, WorldConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let world = WorldConfig::default();
    let corpus: Vec<LoadedUtt> = cadence_core::pipeline::materialize_corpus(&world, 200, 50, 42)
        .unwrap()
        .into_iter()
        .map(|(item, split, features)| LoadedUtt {
            utt_id: item.utt_id,
            split,
            tokens: item.tokens,
            track: item.track,
            features,
        })
        .collect();
    let train: Vec<LoadedUtt> = corpus.iter().filter(|u| u.split == Split::Train).cloned().collect();
    let test: Vec<LoadedUtt> = corpus.iter().filter(|u| u.split == Split::Test).cloned().collect();
    let mean_frames: f64 =
        train.iter().map(|u| u.features.frames() as f64).sum::<f64>() / train.len() as f64;
    println!("train {} test {} mean_frames {:.1}", train.len(), test.len(), mean_frames);

    let mut rng = stream(7, "model-init", 0);
    let gen_cfg = GenConfig::toy(world.channels);
    let net = GeneratorNet::new(gen_cfg, &mut rng);
    let cond = TextCond::new(CondConfig::toy(world.vocab, gen_cfg.width), &mut rng);
    println!("generator params {}", net.param_count());
    let mut trainer = Trainer::new(net, cond, TrainerConfig::default());

    let t0 = Instant::now();
    let mut first_loss = None;
    train_loop(&mut trainer, &train, steps, |s| {
        if first_loss.is_none() {
            first_loss = Some(s.loss);
        }
        if s.step % 100 == 0 {
            println!(
                "step {:>5} loss {:>8.4} |a_d| {:.4} |a_p| {:.4} ({:.1}s)",
                s.step,
                s.loss,
                s.gate_d_ema,
                s.gate_p_ema,
                t0.elapsed().as_secs_f64()
            );
        }
    })
    .unwrap();
    println!("trained {} steps in {:.1}s", steps, t0.elapsed().as_secs_f64());

    // diagnostic: frame norms of one controlled sample, span-annotated
    let sigs = TokenSignatures::from_config(&world).unwrap();
    let probe = test.iter().find(|u| u.track.timings.iter().any(|t| t.pause_frames > 0)).unwrap();
    let spec = cadence_core::flow::SampleSpec {
        tokens: &probe.tokens,
        track: Some(&probe.track),
        context: None,
        prompt_tokens: 0,
        spontaneous_len: None,
        euler_steps: 16,
        seed: 3,
    };
    let out = cadence_core::flow::sample(&trainer.net, &trainer.cond, &spec).unwrap();
    let mut cursor = 0usize;
    for (tok, tim) in probe.tokens.iter().zip(&probe.track.timings) {
        let mut content_norms = Vec::new();
        for _ in 0..tim.content_frames {
            let n: f64 = out.data.row(cursor).iter().map(|x| x * x).sum::<f64>().sqrt();
            content_norms.push(n);
            cursor += 1;
        }
        let mut pause_norms = Vec::new();
        for _ in 0..tim.pause_frames {
            let n: f64 = out.data.row(cursor).iter().map(|x| x * x).sum::<f64>().sqrt();
            pause_norms.push(n);
            cursor += 1;
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        println!(
            "tok {:>2} d={:>2} p={:>2}  content_norm {:.3}  pause_norm {:.3}  pause_norms {:?}",
            tok, tim.content_frames, tim.pause_frames, mean(&content_norms), mean(&pause_norms),
            pause_norms.iter().map(|x| (x * 100.0).round() / 100.0).collect::<Vec<_>>()
        );
    }

    let tau = frames_to_ms(2, world.frame_rate());
    for mode in [Mode::Controlled, Mode::Spontaneous] {
        let opts = EvalOptions {
            mode,
            format: CondFormat::Full,
            euler_steps: 16,
            seed: 11,
            thresholds_ms: vec![tau, 50.0, 100.0],
            prompt_fraction: 0.25,
        };
        let t1 = Instant::now();
        let out = evaluate(&trainer.net, &trainer.cond, &world, &sigs, &test, &opts).unwrap();
        println!("--- {} ({:.1}s)", mode.tag(), t1.elapsed().as_secs_f64());
        print!("{}", out.report.render_human());
    }
}
