use ufcgen::data::*;
use ufcgen::vq;

fn main() {
    let ds = make_dataset(SPEC_COUNT * 8, 11, true).unwrap();
    let mut patches = Vec::new();
    for rec in &ds.records {
        patches.extend(vq::extract_patches(&rec.image, 4, 4).unwrap());
    }
    let (cb, _) = vq::fit_codebook(&patches, 48, 64, 60, 13).unwrap();
    // red stripes corner on black = color red(0) shape stripes(2) pos corner(1) bg black(0)
    for (si, s) in [(0*32 + 2*8 + 0*2 + 1, 0u64), (0*32+2*8+1*2+1, 1), (1*32+2*8+1*2+0, 0)] {
        let spec = AttributeSpec::from_index(si);
        let img = render(&spec, s);
        let grid = vq::encode_image(&img, &cb, 4, 4).unwrap();
        let back = vq::decode_tokens(&grid, &cb, 4, 4).unwrap();
        println!("== {} seed {s} -> {:?}", spec.text().join(" "), debug_recover(&back));
        println!("{}", debug_row_profile(&back));
    }
}
