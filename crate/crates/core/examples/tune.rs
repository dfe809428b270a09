use fcssl::encoder::EncoderConfig;
use fcssl::mat::derive_seed;
use fcssl::probe::{extract_embeddings, repeated_eval};
use fcssl::ssl::SslModel;
use fcssl::synth::{gen_cohort, SynthSpec};
use fcssl::trainer::{pretrain, TrainConfig};

fn tiny16(readout_dim: usize) -> EncoderConfig {
    EncoderConfig { v_rois: 16, n_layers: 2, n_heads: 4, ffn_dim: 32, readout_dim, mask_ratio: 0.2 }
}

fn probe_acc(records: &[fcssl::probe::EmbeddingRecord], seed: u64) -> f64 {
    repeated_eval(records, (0.7, 0.15, 0.15), 10, seed).unwrap().accuracy.mean.unwrap()
}

/// between-class mean distance^2 over mean within-class variance (embedding SNR)
fn class_snr(records: &[fcssl::probe::EmbeddingRecord]) -> f64 {
    let dim = records[0].vector.len();
    let mut means = vec![vec![0.0; dim]; 2];
    let mut counts = [0usize; 2];
    for r in records {
        let c = r.label as usize;
        counts[c] += 1;
        for j in 0..dim { means[c][j] += r.vector[j]; }
    }
    for c in 0..2 { for j in 0..dim { means[c][j] /= counts[c] as f64; } }
    let dist2: f64 = (0..dim).map(|j| (means[0][j] - means[1][j]).powi(2)).sum();
    let mut var = 0.0;
    for r in records {
        let m = &means[r.label as usize];
        var += (0..dim).map(|j| (r.vector[j] - m[j]).powi(2)).sum::<f64>();
    }
    var /= records.len() as f64;
    dist2 / var
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let effect: f64 = args[1].parse().unwrap();
    let noise: f64 = args[2].parse().unwrap();
    let seeds: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);
    let readout: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
    let enc = tiny16(readout);
    let mut trained_accs = Vec::new();
    let mut untrained_accs = Vec::new();
    for seed in 0..seeds {
        let spec = SynthSpec::standard(200, 16, 200, 2, effect, noise, derive_seed(seed, "cohort", &[]));
        let cohort = gen_cohort(&spec).unwrap();
        let batch: usize = std::env::args().nth(4).map(|s| s.parse().unwrap()).unwrap_or(256);
        let mode = std::env::args().nth(6).unwrap_or_else(|| "full".into());
        let (cls, rec) = match mode.as_str() {
            "latent" => (false, false),
            "full" => (true, true),
            other => panic!("unknown mode {other}"),
        };
        let cfg = TrainConfig {
            seed: derive_seed(seed, "train", &[]),
            batch_size: batch,
            mrm_cls: cls,
            mrm_rec: rec,
            ..TrainConfig::default()
        };

        let t0 = std::time::Instant::now();
        let outcome = pretrain::<f32>(&cohort, &enc, &cfg).unwrap();
        let train_time = t0.elapsed();

        let untrained = SslModel::<f32>::init(&enc, derive_seed(cfg.seed, "init", &[])).unwrap();
        let emb_trained = extract_embeddings(&outcome.model, &cohort).unwrap();
        let emb_untrained = extract_embeddings(&untrained, &cohort).unwrap();
        let acc_t = probe_acc(&emb_trained, derive_seed(seed, "probe", &[]));
        let acc_u = probe_acc(&emb_untrained, derive_seed(seed, "probe", &[]));
        println!("seed {seed}: trained={acc_t:.3} untrained={acc_u:.3} snr_t={:.4} snr_u={:.4} (pretrain {train_time:.1?}, best {:.3})",
            class_snr(&emb_trained), class_snr(&emb_untrained), outcome.best_loss.unwrap());
        trained_accs.push(acc_t);
        untrained_accs.push(acc_u);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("effect={effect} noise={noise}: mean trained={:.3} untrained={:.3} gap={:+.3}",
        mean(&trained_accs), mean(&untrained_accs), mean(&trained_accs) - mean(&untrained_accs));
}
