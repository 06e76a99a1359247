//! Score distillation: pull a flat gray image toward whatever the mock
//! denoiser prefers, and watch the surrogate shrink.
//!
//! cargo run --example score_distillation

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use texhuman::guidance::{sds_grad_text, MockBackend, MockSpec, NoiseSchedule, SdsConfig};
use texhuman::scene::Image;

fn main() -> texhuman::Result<()> {
    let schedule = NoiseSchedule::default();
    let mock = MockBackend::new(MockSpec::default(), schedule.clone())?;
    let cfg = SdsConfig::text_default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut img = Image::filled(48, 48, 3, 0.5);
    for step in 0..200 {
        let out = sds_grad_text(&mock, &schedule, &img, "a person", &cfg, &mut rng)?;
        for (v, g) in img.data.iter_mut().zip(&out.grad.data) {
            *v = (*v - 0.05 * g).clamp(0.0, 1.0);
        }
        if step % 40 == 0 {
            println!("step {step:>3}: t {:>3}, surrogate {:.4}, mean {:.4}", out.t, out.surrogate, img.mean());
        }
    }
    Ok(())
}
