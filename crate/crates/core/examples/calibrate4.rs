//! Scratch diagnostics: left-first signal vs geometry (N/T ratio).

use ardiffusion::data::{synth_task, TaskKind, Vocabulary};
use ardiffusion::eval::{evaluate_corpus, spearman_pvalue_greater, stabilization_steps};
use ardiffusion::infer::{generate, make_plan};
use ardiffusion::model::{Denoiser, ModelConfig};
use ardiffusion::train::{
    train_loop, EncodedCorpus, PlanChoice, TrainConfig, TrainSignal,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(16);
    let t_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(50);
    let stop_em: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.95);
    let task: TaskKind = args
        .get(4)
        .map(|s| s.parse().unwrap())
        .unwrap_or(TaskKind::Sort);
    let m_steps: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(20);

    let src_len = n + 2;
    let train_corpus = synth_task(task, 20, n, 200, 11).unwrap();
    let held_corpus = synth_task(task, 20, n, 100, 999).unwrap();
    let vocab = Vocabulary::from_corpus(&train_corpus);
    let train = EncodedCorpus::new(&train_corpus, &vocab, src_len, n).unwrap();
    let held = EncodedCorpus::new(&held_corpus, &vocab, src_len, n).unwrap();

    for seed in [1u64, 2, 3] {
        let model_cfg = ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: 32,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_src_len: src_len,
            max_tgt_len: n,
            dropout: 0.0,
        };
        let cfg = TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            max_steps: args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1500),
            warmup_steps: 100,
            total_steps: t_steps,
            max_tgt_len: n,
            seed,
            plan: PlanChoice::Anchored,
            log_every: 50,
            ..TrainConfig::default()
        };
        let schedule = cfg.noise_schedule().unwrap();
        let plan = cfg.timestep_plan().unwrap();
        let mut model = Denoiser::new(model_cfg, seed).unwrap();
        let t0 = std::time::Instant::now();
        let summary = train_loop(&cfg, &train, &mut model, |rec, m| {
            if false {
                let ip = make_plan(plan.clone(), 20, 1, 0).unwrap();
                let ev = evaluate_corpus(m, &schedule, &train, &ip, 5, false).unwrap();
                if ev.token_em >= stop_em {
                    return Ok(TrainSignal::Stop);
                }
            }
            Ok(TrainSignal::Continue)
        })
        .unwrap();

        let ip = make_plan(plan.clone(), m_steps, 1, seed).unwrap();
        let ev = evaluate_corpus(&model, &schedule, &held, &ip, 7, false).unwrap();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut per_pos: Vec<Vec<f64>> = vec![Vec::new(); n];
        for (i, src) in held.src.iter().enumerate().take(100) {
            let out = generate(&model, &schedule, src, &ip, 1000 + i as u64).unwrap();
            let stab = stabilization_steps(&out.trace.unwrap());
            let content_len = held.tgt[i]
                .iter()
                .filter(|&&id| id != ardiffusion::data::PAD_ID)
                .count();
            for (pos, &s) in stab.iter().enumerate() {
                if pos >= content_len {
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
            .map(|v| format!("{:.0}", v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        println!(
            "seed {seed} ({}st, {:.0}s, em {:.2}): rho {rho:.3} p {p:.4} | {}",
            summary.steps_run,
            t0.elapsed().as_secs_f64(),
            ev.token_em,
            means.join(" ")
        );
    }
}
