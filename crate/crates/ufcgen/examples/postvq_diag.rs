use ufcgen::data::*;
use ufcgen::vq;
use ufcgen::rng::Rng;

fn main() {
    // pipeline-realistic: 4096 images, subsample 65536 patches, restarts
    let ds = make_dataset(4096, 11, true).unwrap();
    let mut patches = Vec::new();
    for rec in &ds.records {
        patches.extend(vq::extract_patches(&rec.image, 4, 4).unwrap());
    }
    let n_patches = patches.len() / 48;
    for cbseed in [13u64, 99, 7] {
        let mut rng = Rng::substream(cbseed, &[0x7375]);
        let mut sub = Vec::with_capacity(65536 * 48);
        for _ in 0..65536 {
            let i = rng.below(n_patches);
            sub.extend_from_slice(&patches[i * 48..(i + 1) * 48]);
        }
        let t0 = std::time::Instant::now();
        let (cb, stats) = vq::fit_codebook_restarts(&sub, 48, 64, 100, cbseed, 4).unwrap();
        let fit_t = t0.elapsed().as_secs_f64();
        let mut fail_shapes = [0usize; 4];
        let (mut ok, mut total) = (0, 0);
        for si in 0..SPEC_COUNT {
            let spec = AttributeSpec::from_index(si);
            for s in 0..4u64 {
                let img = render(&spec, s);
                let grid = vq::encode_image(&img, &cb, 4, 4).unwrap();
                let back = vq::decode_tokens(&grid, &cb, 4, 4).unwrap();
                total += 1;
                if compliance_oracle(&back, &spec.text()).unwrap() { ok += 1; }
                else { fail_shapes[spec.shape as usize] += 1; }
            }
        }
        println!("cbseed {cbseed}: rate {:.4} (fit {:.1}s, {} iters, obj {:.0}) fails c/s/st/x = {:?}",
            ok as f64/total as f64, fit_t, stats.iterations, stats.objective.last().unwrap(), fail_shapes);
    }
}
