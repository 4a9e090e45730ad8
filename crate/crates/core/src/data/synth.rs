//! Synthetic document pages: dark pseudo-text on a light page plus five
//! textured field regions whose masks are the segmentation targets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Sample, FIELDS, NUM_FIELDS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::mix_seed;

pub const MIN_COVERAGE: f64 = 0.002;
pub const MAX_COVERAGE: f64 = 0.20;
pub const MIN_PAGE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn overlaps(&self, o: &Rect, margin: usize) -> bool {
        self.y < o.y + o.h + margin && o.y < self.y + self.h + margin && self.x < o.x + o.w + margin && o.x < self.x + self.w + margin
    }
}

/// Per-field fill, chosen so every field has a distinct look.
fn texture(field: usize, y: usize, x: usize, r: &Rect) -> f32 {
    let (ly, lx) = (y - r.y, x - r.x);
    match field {
        0 => if ly % 3 == 0 { 0.6 } else { 0.12 },
        1 => if lx % 2 == 0 { 0.1 } else { 0.9 },
        2 => if (ly / 2 + lx / 2) % 2 == 0 { 0.2 } else { 0.8 },
        3 => if (lx + ly) % 4 < 2 { 0.3 } else { 0.95 },
        _ => {
            let border = ly == 0 || lx == 0 || ly + 1 == r.h || lx + 1 == r.w;
            if border { 0.05 } else { 0.5 }
        }
    }
}

const WORDS: [&str; 16] = [
    "lease", "mineral", "royalty", "tract", "acres", "deed", "conveyance", "survey", "section", "parcel", "interest", "estate",
    "assignment", "record", "witness", "notary",
];
const STATES: [&str; 6] = ["Texas", "Oklahoma", "Louisiana", "New Mexico", "Colorado", "Wyoming"];
const COUNTIES: [&str; 6] = ["Reeves", "Loving", "Caddo", "Eddy", "Weld", "Converse"];
const COMPANIES: [&str; 8] = [
    "Acme Energy LLC", "Blue Mesa Resources", "Cedar Ridge Holdings", "Delta Royalty Co", "Eagle Basin Partners",
    "Falcon Minerals Inc", "Granite Peak Oil", "Harbor Land Trust",
];

fn field_text(rng: &mut ChaCha8Rng) -> String {
    let title: Vec<&str> = (0..3).map(|_| *WORDS.choose(rng).expect("nonempty")).collect();
    format!(
        "AGREEMENT TITLE: {} agreement\nSTATE: {}\nCOUNTY: {}\nGRANTOR: {}\nGRANTEE: {}",
        title.join(" "),
        STATES.choose(rng).expect("nonempty"),
        COUNTIES.choose(rng).expect("nonempty"),
        COMPANIES.choose(rng).expect("nonempty"),
        COMPANIES.choose(rng).expect("nonempty"),
    )
}

fn place(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Vec<Rect>> {
    let mut rects: Vec<Rect> = Vec::with_capacity(NUM_FIELDS);
    for field in 0..NUM_FIELDS {
        // Title is wide; the others are label-sized.
        let (wmin, wmax) = if field == 0 { (w / 4, w / 2) } else { (w / 8, w / 3) };
        let (hmin, hmax) = if field == 0 { (h / 16, h / 8) } else { (h / 24, h / 10) };
        let (hmin, wmin) = (hmin.max(4), wmin.max(4));
        let mut placed = None;
        for _ in 0..2000 {
            let rh = rng.gen_range(hmin..=hmax.max(hmin));
            let rw = rng.gen_range(wmin..=wmax.max(wmin));
            if rh + 2 > h || rw + 2 > w {
                break;
            }
            let r = Rect { y: rng.gen_range(1..=h - rh - 1), x: rng.gen_range(1..=w - rw - 1), h: rh, w: rw };
            if rects.iter().all(|o| !r.overlaps(o, 2)) {
                placed = Some(r);
                break;
            }
        }
        rects.push(placed.ok_or_else(|| Error::Generation(format!("page {h}x{w} too small to place 5 field regions")))?);
    }
    Ok(rects)
}

/// Renders one page; `seed` fully determines the result.
pub fn render_page(sample_id: String, h: usize, w: usize, seed: u64) -> Result<Sample> {
    if h < MIN_PAGE || w < MIN_PAGE {
        return Err(Error::Generation(format!("page {h}x{w} below the {MIN_PAGE}x{MIN_PAGE} minimum")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gray: Vec<f32> = (0..h * w).map(|_| 0.97 + rng.gen_range(-0.03f32..=0.03)).collect();
    // Pseudo-text: rows of dark dashes ("words") every few pixels.
    let mut y = rng.gen_range(2..6);
    while y + 2 < h {
        let mut x = rng.gen_range(1..8);
        while x + 2 < w {
            let len = rng.gen_range(3..12).min(w - 1 - x);
            let ink = rng.gen_range(0.15f32..0.45);
            for yy in y..y + 2 {
                gray[yy * w + x..yy * w + x + len].iter_mut().for_each(|p| *p = ink);
            }
            x += len + rng.gen_range(2..6);
        }
        y += rng.gen_range(6..10);
    }
    let rects = place(&mut rng, h, w)?;
    let mut masks = vec![0f32; NUM_FIELDS * h * w];
    for (f, r) in rects.iter().enumerate() {
        for yy in r.y..r.y + r.h {
            for xx in r.x..r.x + r.w {
                gray[yy * w + xx] = (texture(f, yy, xx, r) + rng.gen_range(-0.03f32..=0.03)).clamp(0.0, 1.0);
                masks[f * h * w + yy * w + xx] = 1.0;
            }
        }
    }
    for (f, m) in masks.chunks(h * w).enumerate() {
        let frac = m.iter().filter(|&&v| v > 0.0).count() as f64 / (h * w) as f64;
        if !(MIN_COVERAGE..=MAX_COVERAGE).contains(&frac) {
            return Err(Error::Generation(format!("{} coverage {frac:.4} outside [{MIN_COVERAGE}, {MAX_COVERAGE}]", FIELDS[f])));
        }
    }
    let image: Vec<f32> = (0..3).flat_map(|_| gray.iter().copied()).collect();
    Ok(Sample {
        sample_id,
        image: Tensor::new(&[3, h, w], image)?,
        masks: Tensor::new(&[NUM_FIELDS, h, w], masks)?,
        text: field_text(&mut rng),
        embedding: None,
    })
}

/// `n` pages of size `page = (H, W)`. Sample `i` is seeded from `(seed, i)`.
pub fn synth_generate(n: usize, page: (usize, usize), seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Generation("need at least one sample".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| render_page(format!("page{i:05}"), page.0, page.1, mix_seed(seed, i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_are_valid_and_bounded() {
        for page in [(128, 128), (256, 256), (64, 96)] {
            for s in synth_generate(6, page, 3).unwrap() {
                assert!(s.masks.data().iter().all(|&v| v == 0.0 || v == 1.0));
                assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                let hw = page.0 * page.1;
                for m in s.masks.data().chunks(hw) {
                    let frac = m.iter().sum::<f32>() as f64 / hw as f64;
                    assert!((MIN_COVERAGE..=MAX_COVERAGE).contains(&frac), "{frac}");
                }
                assert_eq!(s.text.lines().count(), 5);
            }
        }
    }

    #[test]
    fn seeds_control_layout() {
        let a = synth_generate(3, (128, 128), 1).unwrap();
        let b = synth_generate(3, (128, 128), 1).unwrap();
        let c = synth_generate(3, (128, 128), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].masks, c[0].masks);
    }

    #[test]
    fn tiny_pages_are_rejected() {
        assert!(matches!(synth_generate(1, (16, 16), 1), Err(Error::Generation(_))));
        assert!(matches!(synth_generate(0, (64, 64), 1), Err(Error::Generation(_))));
    }
}
