//! Scratch calibration for the few-step protocol (not part of the deliverable).

use ardiffusion::data::{synth_task, TaskKind, Vocabulary};
use ardiffusion::eval::evaluate_corpus;
use ardiffusion::infer::make_plan;
use ardiffusion::model::{Denoiser, ModelConfig};
use ardiffusion::train::{
    train_loop, EncodedCorpus, PlanChoice, TrainConfig, TrainSignal,
};

fn train_one(
    plan_kind: PlanChoice,
    seed: u64,
    train: &EncodedCorpus,
    vocab_len: usize,
    max_steps: usize,
    check_every: usize,
    stop_token_em: f64,
) -> (Denoiser, usize) {
    let model_cfg = ModelConfig {
        vocab_size: vocab_len,
        embed_dim: 32,
        layers: 2,
        heads: 4,
        ffn_dim: 128,
        max_src_len: 10,
        max_tgt_len: 8,
        dropout: 0.0,
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 32,
        max_steps,
        warmup_steps: 100,
        total_steps: 100,
        max_tgt_len: 8,
        seed,
        plan: plan_kind,
        log_every: check_every,
        ..TrainConfig::default()
    };
    let schedule = cfg.noise_schedule().unwrap();
    let plan = cfg.timestep_plan().unwrap();
    let mut model = Denoiser::new(model_cfg, seed).unwrap();
    let mut steps = 0usize;
    let summary = train_loop(&cfg, train, &mut model, |rec, m| {
        steps = rec.step + 1;
        if rec.step > 0 && rec.step % check_every == 0 {
            let ip = make_plan(plan.clone(), 20, 1, 0).unwrap();
            let ev = evaluate_corpus(m, &schedule, train, &ip, 5, false).unwrap();
            if ev.token_em >= stop_token_em {
                return Ok(TrainSignal::Stop);
            }
        }
        Ok(TrainSignal::Continue)
    })
    .unwrap();
    (model, summary.steps_run)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stop_em: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.97);
    let check_every: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(100);
    let task: TaskKind = args
        .get(3)
        .map(|s| s.parse().unwrap())
        .unwrap_or(TaskKind::Copy);

    let train_corpus = synth_task(task, 20, 8, 200, 11).unwrap();
    let held_corpus = synth_task(task, 20, 8, 100, 999).unwrap();
    let vocab = Vocabulary::from_corpus(&train_corpus);
    let train = EncodedCorpus::new(&train_corpus, &vocab, 10, 8).unwrap();
    let held = EncodedCorpus::new(&held_corpus, &vocab, 10, 8).unwrap();

    let mut drops: Vec<(f64, f64)> = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut per_plan = Vec::new();
        for kind in [PlanChoice::Anchored, PlanChoice::Uniform] {
            let t0 = std::time::Instant::now();
            let (model, steps) =
                train_one(kind, seed, &train, vocab.len(), 5000, check_every, stop_em);
            let cfg = TrainConfig {
                total_steps: 100,
                max_tgt_len: 8,
                plan: kind,
                ..TrainConfig::default()
            };
            let schedule = cfg.noise_schedule().unwrap();
            let plan = cfg.timestep_plan().unwrap();
            let mut scores = Vec::new();
            for m in [20usize, 3, 2] {
                let ip = make_plan(plan.clone(), m, 1, 0).unwrap();
                let ev = evaluate_corpus(&model, &schedule, &held, &ip, 7, false).unwrap();
                scores.push((m, ev.bleu, ev.seq_em, ev.token_em));
            }
            let drop2 = (scores[0].1 - scores[2].1 + 100.0 * (scores[0].2 - scores[2].2)) / 2.0;
            println!(
                "seed {seed} {kind:?}: stopped at {steps} in {:.0}s | M=20 {:.2}/{:.3} M=3 {:.2}/{:.3} M=2 {:.2}/{:.3} | avg_drop(2) {:.3}",
                t0.elapsed().as_secs_f64(),
                scores[0].1, scores[0].2,
                scores[1].1, scores[1].2,
                scores[2].1, scores[2].2,
                drop2
            );
            per_plan.push(drop2);
        }
        drops.push((per_plan[0], per_plan[1]));
    }
    let mean_anchored = drops.iter().map(|d| d.0).sum::<f64>() / drops.len() as f64;
    let mean_uniform = drops.iter().map(|d| d.1).sum::<f64>() / drops.len() as f64;
    println!("mean drop anchored {mean_anchored:.3} vs uniform {mean_uniform:.3} -> {}",
        if mean_anchored < mean_uniform { "PASS" } else { "FAIL" });
}
