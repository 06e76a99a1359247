//! PSNR, SSIM and the stub learned metrics on a synthetic pair.
//!
//! cargo run --example image_metrics

use texhuman::eval::{cosine_similarity, psnr, ssim, MetricBackend, StubMetricBackend};
use texhuman::scene::Image;
use texhuman::synthetic::two_tone_figure;

fn rgb(img: &Image) -> Image {
    Image::from_fn(img.width, img.height, 3, |r, c, k| {
        let a = img.get(r, c, 3);
        img.get(r, c, k) * a + (1.0 - a)
    })
}

fn main() -> texhuman::Result<()> {
    let gt = rgb(&two_tone_figure(128, [0.8, 0.2, 0.2], [0.2, 0.2, 0.8]));
    let pred = rgb(&two_tone_figure(128, [0.75, 0.25, 0.2], [0.2, 0.25, 0.8]));
    let offset = gt.map(|v| (v - 0.1).max(0.0));
    let stub = StubMetricBackend::new(0);
    for (name, img) in [("recolored", &pred), ("darkened", &offset)] {
        println!(
            "{name:>9}: PSNR {:.2} dB, SSIM {:.4}, stub LPIPS {:.4}, stub CLIP {:.4}",
            psnr(img, &gt)?,
            ssim(img, &gt)?,
            stub.lpips(img, &gt)?,
            cosine_similarity(&stub.embed(img)?, &stub.embed(&gt)?)?
        );
    }
    Ok(())
}
