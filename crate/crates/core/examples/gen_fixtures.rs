//! Regenerates the bundled demo assets in `fixtures/` from the procedural
//! generators. Run from the crate root after changing `fixtures.rs`:
//!
//!     cargo run -p cyclestyle --example gen_fixtures

use cyclestyle::fixtures::{mask_image, second_toy_pair, toy_pair, toy_unseen};
use cyclestyle::image_io::PngDepth;
use cyclestyle::stylenet::StyleTag;
use std::path::Path;

fn main() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    let save = |name: &str, img: &cyclestyle::image_io::ImageBuffer| {
        img.save_png(&dir.join(name), PngDepth::Eight).unwrap();
        println!("wrote {}", dir.join(name).display());
    };
    let p = toy_pair();
    save("toy_a.png", &p.image_a);
    save("toy_b.png", &p.image_b);
    save("toy_mask_a.png", &mask_image(p.masks.side(StyleTag::A)));
    save("toy_mask_b.png", &mask_image(p.masks.side(StyleTag::B)));
    let q = second_toy_pair();
    save("toy2_a.png", &q.image_a);
    save("toy2_b.png", &q.image_b);
    save("toy2_mask_a.png", &mask_image(q.masks.side(StyleTag::A)));
    save("toy2_mask_b.png", &mask_image(q.masks.side(StyleTag::B)));
    let (u, labels) = toy_unseen();
    save("toy_unseen.png", &u);
    save("toy_unseen_mask.png", &mask_image(&labels));
}
