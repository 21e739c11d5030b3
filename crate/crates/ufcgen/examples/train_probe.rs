use ufcgen::bench::compliance_suite;
use ufcgen::data::make_dataset;
use ufcgen::decode::{mnag_decode, pnag_decode, PnagConfig};
use ufcgen::train::{train, TrainConfig};
use ufcgen::vq::{extract_patches, fit_codebook_restarts};
use ufcgen::rng::Rng;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(512);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let ds = make_dataset(n, 11, true).unwrap();
    let mut patches = Vec::new();
    for rec in &ds.records {
        patches.extend(extract_patches(&rec.image, 4, 4).unwrap());
    }
    let n_patches = patches.len() / 48;
    let mut rng = Rng::substream(13, &[0x7375]);
    let take = 65536.min(n_patches);
    let mut sub = Vec::with_capacity(take * 48);
    for _ in 0..take {
        let i = rng.below(n_patches);
        sub.extend_from_slice(&patches[i * 48..(i + 1) * 48]);
    }
    let (cb, _) = fit_codebook_restarts(&sub, 48, 64, 100, 13, 4).unwrap();
    let cfg = TrainConfig { epochs, lr, ..TrainConfig::default() };
    let dir = std::env::temp_dir().join("ufcgen-train-probe");
    let _ = std::fs::remove_dir_all(&dir);
    let out = train(&ds, &cb, &cfg, &dir).unwrap();
    eprintln!("train: {:.1}s, losses {:?}", out.wall_seconds, out.epoch_losses.iter().map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>());

    let model = out.model;
    let codec = out.codec;
    for (name, b) in [("pnag-b5", 5), ("pnag-b1", 1)] {
        let cfgd = PnagConfig { candidates: b, ..PnagConfig::default() };
        let r = compliance_suite(&codec, &cb, 100, 99, |controls, seed| {
            pnag_decode(controls, &model, &codec, &cfgd, seed).map(|(g, _)| g)
        }).unwrap();
        eprintln!("{name}: {:.1}% [{:.1}, {:.1}]", r.rate * 100.0, r.interval_low * 100.0, r.interval_high * 100.0);
    }
    let r = compliance_suite(&codec, &cb, 100, 99, |controls, seed| {
        mnag_decode(controls, &model, &codec, 10, seed).map(|(g, _)| g)
    }).unwrap();
    eprintln!("mnag: {:.1}% [{:.1}, {:.1}]", r.rate * 100.0, r.interval_low * 100.0, r.interval_high * 100.0);

    // attribute-level failure tally for pnag-b5
    use ufcgen::data::{AttributeSpec, SPEC_COUNT, debug_recover};
    use ufcgen::codec::{encode_text, ControlSet};
    let mut fail_attr = [0usize; 4];
    let mut fails = 0;
    let mut rng2 = Rng::new(555);
    let pc = PnagConfig::default();
    for i in 0..100 {
        let spec = AttributeSpec::from_index(rng2.below(SPEC_COUNT));
        let controls = ControlSet { text: Some(encode_text(&spec.text(), &codec.vocab)), ..Default::default() };
        let (grid, _) = pnag_decode(&controls, &model, &codec, &pc, 7000 + i).unwrap();
        let img = ufcgen::vq::decode_tokens(&grid, &cb, 4, 4).unwrap();
        let rec = debug_recover(&img);
        let okv = [rec.0 == Some(spec.background), rec.1 == Some(spec.shape), rec.2 == Some(spec.color), rec.3 == Some(spec.position)];
        if okv.iter().any(|&b| !b) {
            fails += 1;
            for (j, &b) in okv.iter().enumerate() { if !b { fail_attr[j] += 1; } }
        }
    }
    eprintln!("fails {fails}/100: bg {} shape {} color {} pos {}", fail_attr[0], fail_attr[1], fail_attr[2], fail_attr[3]);
}
// attribute-level failure tally appended by diagnostics below
