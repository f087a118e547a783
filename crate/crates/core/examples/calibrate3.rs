//! Scratch diagnostics for the left-first stabilization signal.

use ardiffusion::data::{synth_task, TaskKind, Vocabulary};
use ardiffusion::eval::{evaluate_corpus, spearman_pvalue_greater, stabilization_steps};
use ardiffusion::infer::{generate, make_plan};
use ardiffusion::model::{Denoiser, ModelConfig};
use ardiffusion::train::{
    train_loop, EncodedCorpus, PlanChoice, TrainConfig, TrainSignal,
};

fn train_one(seed: u64, train: &EncodedCorpus, vocab_len: usize, stop_token_em: f64) -> Denoiser {
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
        plan: PlanChoice::Anchored,
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
    let args: Vec<String> = std::env::args().collect();
    let stop_em: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.97);
    let m_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
    let content_only: bool = args.get(3).map(|s| s == "content").unwrap_or(false);

    let train_corpus = synth_task(TaskKind::Sort, 20, 8, 200, 11).unwrap();
    let held_corpus = synth_task(TaskKind::Sort, 20, 8, 100, 999).unwrap();
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
        let model = train_one(seed, &train, vocab.len(), stop_em);
        let ip = make_plan(plan.clone(), m_steps, 1, seed).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut per_pos: Vec<Vec<f64>> = vec![Vec::new(); 8];
        for (i, src) in held.src.iter().enumerate().take(100) {
            let content_len = held.tgt[i]
                .iter()
                .filter(|&&id| id != ardiffusion::data::PAD_ID)
                .count();
            let out = generate(&model, &schedule, src, &ip, 1000 + i as u64).unwrap();
            let stab = stabilization_steps(&out.trace.unwrap());
            for (pos, &s) in stab.iter().enumerate() {
                if content_only && pos >= content_len {
                    continue;
                }
                xs.push((pos + 1) as f64);
                ys.push(s as f64);
                per_pos[pos].push(s as f64);
            }
        }
        let (rho, p) = spearman_pvalue_greater(&xs, &ys, 2000, 42);
        let means: Vec<String> = per_pos
            .iter()
            .map(|v| {
                if v.is_empty() {
                    "-".into()
                } else {
                    format!("{:.1}", v.iter().sum::<f64>() / v.len() as f64)
                }
            })
            .collect();
        println!(
            "seed {seed}: rho {rho:.3} p {p:.4} | mean stab per pos: {}",
            means.join(" ")
        );
    }
}
