use ufcgen::data::*;
use ufcgen::vq;

fn main() {
    // pristine stat ranges
    let mut ranges: std::collections::BTreeMap<&str, Vec<(f64,f64,f64)>> = Default::default();
    let mut pristine_fails = 0;
    for si in 0..SPEC_COUNT {
        let spec = AttributeSpec::from_index(si);
        for s in 0..8u64 {
            let img = render(&spec, s);
            if !compliance_oracle(&img, &spec.text()).unwrap() { pristine_fails += 1; }
            { let (a,b) = debug_stats(&img); ranges.entry(SHAPES[spec.shape as usize]).or_default().push((a,b,0.0)); }
        }
    }
    println!("pristine failures: {pristine_fails}");
    for (k, v) in &ranges {
        let lo = |f: fn(&(f64,f64,f64))->f64| v.iter().map(f).fold(9.9, f64::min);
        let hi = |f: fn(&(f64,f64,f64))->f64| v.iter().map(f).fold(0.0, f64::max);
        println!("{k:8}: m1 [{:.3},{:.3}] m2 [{:.3},{:.3}] corner [{:.3},{:.3}]",
            lo(|t| t.0), hi(|t| t.0), lo(|t| t.1), hi(|t| t.1), lo(|t| t.2), hi(|t| t.2));
    }

    // vq sweep
    let ds = make_dataset(SPEC_COUNT * 8, 11, true).unwrap();
    let mut patches = Vec::new();
    for rec in &ds.records {
        patches.extend(vq::extract_patches(&rec.image, 4, 4).unwrap());
    }
    let (cb, _) = vq::fit_codebook(&patches, 48, 64, 60, 7).unwrap();
    let mut fail_by_attr = [0usize; 4];
    let mut fail_by_shape = [0usize; 4];
    let (mut total, mut fails) = (0, 0);
    for si in 0..SPEC_COUNT {
        let spec = AttributeSpec::from_index(si);
        for s in 0..2u64 {
            let img = render(&spec, s);
            let grid = vq::encode_image(&img, &cb, 4, 4).unwrap();
            let back = vq::decode_tokens(&grid, &cb, 4, 4).unwrap();
            total += 1;
            if !compliance_oracle(&back, &spec.text()).unwrap() {
                fails += 1;
                fail_by_shape[spec.shape as usize] += 1;
                let rec = debug_recover(&back);
                if rec.0 != Some(spec.background) { fail_by_attr[0] += 1; }
                if rec.1 != Some(spec.shape) { fail_by_attr[1] += 1; }
                if rec.2 != Some(spec.color) { fail_by_attr[2] += 1; }
                if rec.3 != Some(spec.position) { fail_by_attr[3] += 1; }
                if fails <= 10 {
                    let (m1, q) = debug_stats(&back);
                    println!("fail: {} seed {s} -> {:?} m1 {:.3} q {:.3}", spec.text().join(" "), rec, m1, q);
                }
            }
        }
    }
    println!("total {total} fails {fails} rate {:.4}", 1.0 - fails as f64 / total as f64);
    println!("fail attrs: bg {} shape {} color {} pos {}", fail_by_attr[0], fail_by_attr[1], fail_by_attr[2], fail_by_attr[3]);
    println!("fail by true shape: circle {} square {} stripes {} cross {}", fail_by_shape[0], fail_by_shape[1], fail_by_shape[2], fail_by_shape[3]);
}
