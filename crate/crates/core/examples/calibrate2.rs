//! Scratch calibration for MBR, diversity, and left-first checks.

use ardiffusion::data::{synth_task, TaskKind, Vocabulary};
use ardiffusion::eval::{evaluate_corpus, spearman_pvalue_greater, stabilization_steps};
use ardiffusion::infer::{generate, make_plan};
use ardiffusion::model::{Denoiser, ModelConfig};
use ardiffusion::train::{
    train_loop, EncodedCorpus, PlanChoice, TrainConfig, TrainSignal,
};

fn train_one(
    plan_kind: PlanChoice,
    seed: u64,
    train: &EncodedCorpus,
    vocab_len: usize,
    stop_token_em: f64,
) -> Denoiser {
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
        max_steps: 5000,
        warmup_steps: 100,
        total_steps: 100,
        max_tgt_len: 8,
        seed,
        plan: plan_kind,
        log_every: 50,
        ..TrainConfig::default()
    };
    let schedule = cfg.noise_schedule().unwrap();
    let plan = cfg.timestep_plan().unwrap();
    let mut model = Denoiser::new(model_cfg, seed).unwrap();
    train_loop(&cfg, train, &mut model, |rec, m| {
        if rec.step > 0 && rec.step % 50 == 0 {
            let ip = make_plan(plan.clone(), 20, 1, 0).unwrap();
            let ev = evaluate_corpus(m, &schedule, train, &ip, 5, false).unwrap();
            if ev.token_em >= stop_token_em {
                return Ok(TrainSignal::Stop);
            }
        }
        Ok(TrainSignal::Continue)
    })
    .unwrap();
    model
}

fn main() {
    let train_corpus = synth_task(TaskKind::Copy, 20, 8, 200, 11).unwrap();
    let held_corpus = synth_task(TaskKind::Copy, 20, 8, 100, 999).unwrap();
    let vocab = Vocabulary::from_corpus(&train_corpus);
    let train = EncodedCorpus::new(&train_corpus, &vocab, 10, 8).unwrap();
    let held = EncodedCorpus::new(&held_corpus, &vocab, 10, 8).unwrap();
    let cfg = TrainConfig {
        total_steps: 100,
        max_tgt_len: 8,
        ..TrainConfig::default()
    };
    let schedule = cfg.noise_schedule().unwrap();
    let plan = cfg.timestep_plan().unwrap();

    for seed in [1u64, 2, 3] {
        let t0 = std::time::Instant::now();
        let model = train_one(PlanChoice::Anchored, seed, &train, vocab.len(), 0.97);

        // Criterion 7: MBR at k=10 vs k=1.
        let ip1 = make_plan(plan.clone(), 20, 1, seed).unwrap();
        let ev1 = evaluate_corpus(&model, &schedule, &held, &ip1, 7, false).unwrap();
        let ip10 = make_plan(plan.clone(), 20, 10, seed).unwrap();
        let ev10 = evaluate_corpus(&model, &schedule, &held, &ip10, 7, false).unwrap();

        // Criterion 8: SELF-BLEU of sampled candidates.
        let sb = ev10.self_bleu.unwrap();

        // Criterion 9: left-first stabilization over 100 traces.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (i, src) in held.src.iter().enumerate().take(100) {
            let out = generate(&model, &schedule, src, &ip1, 1000 + i as u64).unwrap();
            let stab = stabilization_steps(&out.trace.unwrap());
            for (pos, &s) in stab.iter().enumerate() {
                xs.push((pos + 1) as f64);
                ys.push(s as f64);
            }
        }
        let (rho, p) = spearman_pvalue_greater(&xs, &ys, 2000, 42);

        // Risk property: selected risk <= mean risk per example.
        let risk_ok = ev10.outputs.iter().all(|o| {
            let mean = o.risks.iter().sum::<f64>() / o.risks.len() as f64;
            o.risks[o.mbr_index] <= mean + 1e-12
        });

        println!(
            "seed {seed} ({:.0}s): bleu k1 {:.2} k10-mbr {:.2} | self-bleu {:.2} | rho {:.3} p {:.4} | risk-prop {}",
            t0.elapsed().as_secs_f64(),
            ev1.bleu,
            ev10.bleu,
            sb,
            rho,
            p,
            risk_ok
        );
    }
}
