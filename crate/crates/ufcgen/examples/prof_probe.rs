use std::time::Instant;
use ufcgen::codec::{encode_text, Codec, ControlSet};
use ufcgen::data::make_dataset;
use ufcgen::model::{forward_infer, init_params, GraphModel, Mode, ModelConfig};
use ufcgen::nn::graph::Graph;
use ufcgen::train::vocab_from_dataset;

fn main() {
    let ds = make_dataset(64, 11, true).unwrap();
    let vocab = vocab_from_dataset(&ds, 64);
    let codec = Codec::new(vocab, 8, 8);
    let config = ModelConfig {
        layers: 2, width: 64, heads: 4, ff_width: 256,
        vocab_size: codec.vocab.total_size(), k: 64, n_target: 64,
        max_text_len: 8, mode: Mode::Bidirectional,
    };
    let params = init_params(&config, 1);
    let text = encode_text(&ds.records[0].text, &codec.vocab);
    let controls = ControlSet { text: Some(text), ..Default::default() };
    let layout = codec.build_sequence(&controls, &vec![3; 64], &vec![true; 64]).unwrap();

    // inference forward
    let t0 = Instant::now();
    let n = 200;
    for _ in 0..n {
        let _ = forward_infer(&params, &config, &layout).unwrap();
    }
    println!("infer fwd: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);

    // graph forward only
    let t0 = Instant::now();
    for _ in 0..n {
        let g = Graph::new();
        let gm = GraphModel::new(&g, &params, config);
        let _ = gm.forward(&layout).unwrap();
    }
    println!("graph fwd: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);

    // graph forward + loss + backward
    let t0 = Instant::now();
    for _ in 0..n {
        let g = Graph::new();
        let gm = GraphModel::new(&g, &params, config);
        let out = gm.forward(&layout).unwrap();
        let msm = g.softmax_ce_mean(out.token_logits, (0..64usize).map(|i| i % 64).collect());
        let rel = g.bce_logit(out.rel_logit, 1.0);
        let loss = g.weighted_sum(&[(msm, 1.0), (rel, 0.5)]);
        let grads = g.backward(loss).unwrap();
        let _ = gm.gradients(&params, &grads);
    }
    println!("graph fwd+bwd: {:.2} ms", t0.elapsed().as_secs_f64() * 1e3 / n as f64);
}
