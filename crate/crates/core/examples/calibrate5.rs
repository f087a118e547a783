//! Scratch: loss trajectory on the harder sort setting.

use ardiffusion::data::{synth_task, TaskKind, Vocabulary};
use ardiffusion::model::{Denoiser, ModelConfig};
use ardiffusion::train::{train_loop, EncodedCorpus, PlanChoice, TrainConfig, TrainSignal};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let max_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(3000);
    let n = 16usize;
    let train_corpus = synth_task(TaskKind::Sort, 20, n, 200, 11).unwrap();
    let vocab = Vocabulary::from_corpus(&train_corpus);
    let train = EncodedCorpus::new(&train_corpus, &vocab, n + 2, n).unwrap();
    let model_cfg = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 32,
        layers: 2,
        heads: 4,
        ffn_dim: 128,
        max_src_len: n + 2,
        max_tgt_len: n,
        dropout: 0.0,
    };
    let cfg = TrainConfig {
        lr,
        batch_size: 32,
        max_steps,
        warmup_steps: 100,
        total_steps: 50,
        max_tgt_len: n,
        seed: 1,
        plan: PlanChoice::Anchored,
        log_every: 100,
        ..TrainConfig::default()
    };
    let mut model = Denoiser::new(model_cfg, 1).unwrap();
    let summary = train_loop(&cfg, &train, &mut model, |rec, _| {
        println!(
            "step {} loss {:.4} mse {:.4} nll {:.4} lr {:.2e}",
            rec.step, rec.loss, rec.mse, rec.nll, rec.lr
        );
        Ok(TrainSignal::Continue)
    })
    .unwrap();
    println!(
        "steps_run {} diverged {} final {:.4}",
        summary.steps_run, summary.diverged, summary.final_loss
    );
}
