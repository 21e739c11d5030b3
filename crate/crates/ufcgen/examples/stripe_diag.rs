use ufcgen::data::*;
use ufcgen::vq;
use ufcgen::rng::Rng;

fn main() {
    let ds = make_dataset(4096, 11, true).unwrap();
    let mut patches = Vec::new();
    for rec in &ds.records {
        patches.extend(vq::extract_patches(&rec.image, 4, 4).unwrap());
    }
    let n_patches = patches.len() / 48;
    let mut rng = Rng::substream(13, &[0x7375]);
    let mut sub = Vec::with_capacity(65536 * 48);
    for _ in 0..65536 {
        let i = rng.below(n_patches);
        sub.extend_from_slice(&patches[i * 48..(i + 1) * 48]);
    }
    let (cb, _) = vq::fit_codebook_restarts(&sub, 48, 64, 100, 13, 4).unwrap();
    let mut shown = 0;
    for si in 0..SPEC_COUNT {
        let spec = AttributeSpec::from_index(si);
        for s in 0..4u64 {
            let img = render(&spec, s);
            let grid = vq::encode_image(&img, &cb, 4, 4).unwrap();
            let back = vq::decode_tokens(&grid, &cb, 4, 4).unwrap();
            if !compliance_oracle(&back, &spec.text()).unwrap() && shown < 6 {
                shown += 1;
                let (m1, q) = debug_stats(&back);
                println!("== {} seed {s} -> {:?} (m1 {m1:.3} q {q:.3})", spec.text().join(" "), debug_recover(&back));
                println!("   {}", debug_row_profile(&back));
            }
        }
    }
}
